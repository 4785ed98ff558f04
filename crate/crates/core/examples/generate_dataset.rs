//! Generate a small synthetic scene dataset, save it, and reload it.
//!
//! Run: cargo run --example generate_dataset -- [out_dir]

use rec_attack::scenegen::{generate_dataset, load_dataset, save_dataset};

fn main() -> anyhow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "target/example-dataset".to_string());
    let dir = std::path::Path::new(&out);

    let (train, val) = generate_dataset(7, 20, 5)?;
    println!(
        "generated {} train / {} val scenes ({} / {} referring expressions)",
        train.len(),
        val.len(),
        train.iter().map(|s| s.objects.len()).sum::<usize>(),
        val.iter().map(|s| s.objects.len()).sum::<usize>(),
    );

    let sample = &train[0];
    println!("scene 0 (seed {}):", sample.seed);
    for obj in &sample.objects {
        let (x1, y1, x2, y2) = obj.gt_box.corners();
        println!(
            "  \"{}\" -> box ({x1:.3}, {y1:.3}, {x2:.3}, {y2:.3})",
            obj.prompt.text()
        );
    }

    save_dataset(&train, dir)?;
    let back = load_dataset(dir)?;
    assert_eq!(train, back, "roundtrip must be bit-exact");
    println!("saved to {} and reloaded bit-exactly", dir.display());
    Ok(())
}
