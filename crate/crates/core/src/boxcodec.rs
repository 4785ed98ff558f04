//! Bounding boxes, coordinate-token quantization and IoU scoring.
//!
//! Boxes live in normalized [0,1] xyxy coordinates. The token codec maps
//! each coordinate into one of `BIN_COUNT` bins ([x1, y1, x2, y2] order, no
//! delimiters); decoding dequantizes to bin centers, so a roundtrip moves
//! each coordinate by at most `1/(2*BIN_COUNT)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coordinate vocabulary size (bins 0..=99).
pub const BIN_COUNT: usize = 100;
/// Tokens per box: x1, y1, x2, y2.
pub const SEQ_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("coordinate {0} outside [0,1]")]
    CoordOutOfRange(f64),
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): corners must satisfy 0 <= x1 < x2 <= 1, 0 <= y1 < y2 <= 1")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("token id {0} >= bin count {BIN_COUNT}")]
    TokenOutOfRange(usize),
    #[error("decoded box is degenerate: ordering violated after dequantization")]
    Degenerate,
}

/// Axis-aligned box, normalized corners, (x1,y1) top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, CodecError> {
        let ok = (0.0..1.0).contains(&x1)
            && (0.0..1.0).contains(&y1)
            && x2 <= 1.0
            && y2 <= 1.0
            && x1 < x2
            && y1 < y2;
        if !ok {
            return Err(CodecError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (self.x1, self.y1, self.x2, self.y2)
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
}

/// Quantized coordinate-token serialization of a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxTokenSeq {
    tokens: [usize; SEQ_LEN],
}

impl BoxTokenSeq {
    pub fn new(tokens: [usize; SEQ_LEN]) -> Result<Self, CodecError> {
        for &t in &tokens {
            if t >= BIN_COUNT {
                return Err(CodecError::TokenOutOfRange(t));
            }
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[usize; SEQ_LEN] {
        &self.tokens
    }
}

/// bin = min(floor(v * B), B - 1)
pub fn quantize_coord(v: f64) -> Result<usize, CodecError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(CodecError::CoordOutOfRange(v));
    }
    Ok(((v * BIN_COUNT as f64).floor() as usize).min(BIN_COUNT - 1))
}

/// Bin center: (bin + 0.5) / B.
pub fn dequantize_coord(bin: usize) -> f64 {
    (bin as f64 + 0.5) / BIN_COUNT as f64
}

pub fn encode_box(b: &BoundingBox) -> BoxTokenSeq {
    // coordinates of a valid box are always in range
    let q = |v| quantize_coord(v).expect("valid box coordinate");
    BoxTokenSeq {
        tokens: [q(b.x1), q(b.y1), q(b.x2), q(b.y2)],
    }
}

/// Dequantize a token sequence back into a box. A sequence whose dequantized
/// corners violate the ordering invariant is degenerate and scores as a miss.
pub fn decode_tokens(s: &BoxTokenSeq) -> Result<BoundingBox, CodecError> {
    let [tx1, ty1, tx2, ty2] = *s.tokens();
    let (x1, y1, x2, y2) = (
        dequantize_coord(tx1),
        dequantize_coord(ty1),
        dequantize_coord(tx2),
        dequantize_coord(ty2),
    );
    if x2 <= x1 || y2 <= y1 {
        return Err(CodecError::Degenerate);
    }
    BoundingBox::new(x1, y1, x2, y2)
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// REC success rule: strict IoU > 0.5; a degenerate prediction never hits.
pub fn hit_at_05(pred: Option<&BoundingBox>, gt: &BoundingBox) -> bool {
    match pred {
        Some(p) => iou(p, gt) > 0.5,
        None => false,
    }
}
