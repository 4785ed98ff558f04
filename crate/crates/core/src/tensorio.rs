//! Raw tensor file format shared by dataset images and model checkpoints.
//!
//! Layout: 8-byte magic `RECTNSR\0`, version byte, dtype byte (0 = f32,
//! 1 = f64), ndim byte, ndim u32 little-endian dims, then the payload in
//! little-endian row-major order.

use crate::gradcore::Tensor;
use std::io::{Read, Write};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"RECTNSR\0";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a tensor file")]
    BadMagic,
    #[error("unsupported tensor format version {0}")]
    BadVersion(u8),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("truncated tensor payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("trailing bytes after tensor payload")]
    TrailingBytes,
    #[error("value not representable as f32 at index {0}")]
    NotF32(usize),
}

pub fn write_tensor<W: Write>(
    w: &mut W,
    t: &Tensor,
    dtype: Dtype,
) -> Result<(), TensorIoError> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, if dtype == Dtype::F32 { 0 } else { 1 }])?;
    w.write_all(&[t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match dtype {
        Dtype::F32 => {
            for (i, &v) in t.data().iter().enumerate() {
                let f = v as f32;
                if f as f64 != v {
                    return Err(TensorIoError::NotF32(i));
                }
                w.write_all(&f.to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads one tensor and then requires end-of-stream, for standalone files.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor, TensorIoError> {
    let t = read_tensor_embedded(r)?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(TensorIoError::TrailingBytes);
    }
    Ok(t)
}

/// Reads one tensor, leaving the stream positioned after it; used when
/// several tensors are packed into one file.
pub fn read_tensor_embedded<R: Read>(r: &mut R) -> Result<Tensor, TensorIoError> {
    let mut head = [0u8; 11];
    r.read_exact(&mut head)?;
    if &head[..8] != MAGIC {
        return Err(TensorIoError::BadMagic);
    }
    if head[8] != VERSION {
        return Err(TensorIoError::BadVersion(head[8]));
    }
    let dtype = match head[9] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(TensorIoError::BadDtype(other)),
    };
    let ndim = head[10] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    let width = if dtype == Dtype::F32 { 4 } else { 8 };
    let mut payload = vec![0u8; n * width];
    let mut got = 0;
    while got < payload.len() {
        match r.read(&mut payload[got..])? {
            0 => {
                return Err(TensorIoError::Truncated {
                    expected: payload.len(),
                    got,
                })
            }
            k => got += k,
        }
    }
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(Tensor::new(shape, data).expect("shape/data consistent by construction"))
}
