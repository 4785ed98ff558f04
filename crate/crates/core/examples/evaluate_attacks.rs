//! Run a reduced end-to-end experiment and render the report in both
//! formats.
//!
//! Run: cargo run --release --example evaluate_attacks

use rec_attack::attacks::{AttackKind, PerturbationBudget};
use rec_attack::eval::{render_report, run_experiment, ExperimentConfig, ReportFormat};
use rec_attack::grounder::TrainConfig;

fn main() -> anyhow::Result<()> {
    let cfg = ExperimentConfig {
        master_seed: 7,
        train_scenes: 300,
        val_scenes: 10,
        attack: AttackKind::TextualBox,
        budget: PerturbationBudget::new(16.0 / 255.0, 1.0 / 255.0, 25)?,
        target_box: None,
        checkpoint: None,
        save_checkpoint: None,
        train: TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        },
        out: None,
        format: ReportFormat::Csv,
    };
    let report = run_experiment(&cfg)?;
    println!("csv:\n{}", render_report(&report, ReportFormat::Csv));
    println!("markdown:\n{}", render_report(&report, ReportFormat::Markdown));
    println!("config hash: {}", report.provenance.config_hash);
    Ok(())
}
