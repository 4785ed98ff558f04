//! Tour of the coordinate-token codec: quantization, roundtrips, IoU, and
//! the strict hit rule.
//!
//! Run: cargo run --example box_codec

use rec_attack::boxcodec::{
    decode_tokens, encode_box, hit_at_05, iou, BoundingBox, BoxTokenSeq,
};

fn main() -> anyhow::Result<()> {
    let b = BoundingBox::new(0.12, 0.34, 0.56, 0.78)?;
    let seq = encode_box(&b);
    let back = decode_tokens(&seq)?;
    println!("box {:?}", b.corners());
    println!("tokens {:?}", seq.tokens());
    println!("decoded {:?} (each coordinate within 1/200 of the input)", back.corners());

    let target = BoundingBox::new(0.0, 0.0, 0.2, 0.2)?;
    println!(
        "exclusive target {:?} -> tokens {:?}",
        target.corners(),
        encode_box(&target).tokens()
    );

    let a = BoundingBox::new(0.0, 0.0, 0.5, 0.5)?;
    let c = BoundingBox::new(0.25, 0.25, 0.75, 0.75)?;
    println!("iou of offset squares: {:.4} (1/7)", iou(&a, &c));
    println!("hit_at_05 needs IoU strictly above 0.5:");
    println!("  identical boxes (IoU 1.0): {}", hit_at_05(Some(&a), &a));
    println!("  offset squares (IoU 1/7): {}", hit_at_05(Some(&c), &a));
    println!("  missing prediction:       {}", hit_at_05(None, &a));

    // degenerate decodes (x2 <= x1 after dequantization) are rejected
    let degenerate = BoxTokenSeq::new([50, 10, 50, 90])?;
    println!("degenerate tokens {:?} -> {:?}", degenerate.tokens(), decode_tokens(&degenerate).err());
    Ok(())
}
