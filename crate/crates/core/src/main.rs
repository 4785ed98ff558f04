//! Thin CLI over the library: train or load the victim, run one attack
//! evaluation, and write the report.

use anyhow::Context;
use clap::{Parser, ValueEnum};
use rec_attack::attacks::{AttackKind, PerturbationBudget};
use rec_attack::eval::{run_experiment, render_report, EvalError, ExperimentConfig, ReportFormat};
use rec_attack::grounder::TrainConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttackArg {
    None,
    ImageEmbed,
    TextualBox,
    Exclusive,
    Permuted,
}

impl From<AttackArg> for AttackKind {
    fn from(a: AttackArg) -> Self {
        match a {
            AttackArg::None => AttackKind::None,
            AttackArg::ImageEmbed => AttackKind::ImageEmbed,
            AttackArg::TextualBox => AttackKind::TextualBox,
            AttackArg::Exclusive => AttackKind::Exclusive,
            AttackArg::Permuted => AttackKind::Permuted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Markdown,
}

/// Craft adversarial images against a toy referring-expression grounder and
/// report IoU@0.5 before and after the attack.
#[derive(Parser, Debug)]
#[command(name = "rec-attack", version)]
struct Cli {
    /// Attack to run after the clean evaluation.
    #[arg(long, value_enum, default_value = "none")]
    attack: AttackArg,

    /// l-infinity radius on the 0-255 pixel scale (converted to [0,1]).
    #[arg(long, default_value_t = 16.0)]
    epsilon: f64,

    /// PGD step size on the 0-255 pixel scale.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,

    /// PGD iteration count.
    #[arg(long, default_value_t = 100)]
    iters: usize,

    /// Master seed driving dataset generation and training.
    #[arg(long, default_value_t = 7)]
    seed: u64,

    /// Train a fresh model (write it to --checkpoint when given).
    #[arg(long)]
    train: bool,

    /// Model checkpoint path: loaded unless --train, written when --train.
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Number of training scenes to generate.
    #[arg(long, default_value_t = 2000)]
    dataset_size: usize,

    /// Number of held-out evaluation scenes.
    #[arg(long, default_value_t = 70)]
    val_scenes: usize,

    /// Training epochs (used when training).
    #[arg(long, default_value_t = 60)]
    epochs: usize,

    /// Report output path (printed to stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Report format.
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

fn category(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<EvalError>() {
        match e {
            EvalError::EmptySplit | EvalError::PermutedNeedsTwo(..) => "config",
            EvalError::Attack(_) => "attack",
            EvalError::Model(_) => "model",
            EvalError::Scene(_) => "dataset",
            EvalError::Io { .. } => "io",
        }
    } else {
        "config"
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let budget = PerturbationBudget::new(cli.epsilon / 255.0, cli.alpha / 255.0, cli.iters)
        .context("invalid (epsilon, alpha, iters) budget")?;
    let train = TrainConfig {
        epochs: cli.epochs,
        seed: cli.seed ^ 0x7261_696e, // decorrelate from the dataset stream
        ..TrainConfig::default()
    };
    let load_checkpoint = match (&cli.checkpoint, cli.train) {
        (Some(path), false) => Some(path.clone()),
        _ => None,
    };
    let cfg = ExperimentConfig {
        master_seed: cli.seed,
        train_scenes: cli.dataset_size,
        val_scenes: cli.val_scenes,
        attack: cli.attack.into(),
        budget,
        target_box: None,
        checkpoint: load_checkpoint,
        save_checkpoint: if cli.train { cli.checkpoint.clone() } else { None },
        train,
        out: cli.out.clone(),
        format: match cli.format {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Markdown => ReportFormat::Markdown,
        },
    };
    let report = run_experiment(&cfg)?;
    if cli.out.is_none() {
        print!(
            "{}",
            render_report(
                &report,
                match cli.format {
                    FormatArg::Csv => ReportFormat::Csv,
                    FormatArg::Markdown => ReportFormat::Markdown,
                }
            )
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error category={} message={:#}", category(&err), err);
            ExitCode::from(1)
        }
    }
}
