//! Experiment runner: clean/attacked evaluation over a split, IoU@0.5
//! report rows from integer counters, and deterministic end-to-end runs.

use crate::attacks::{
    exclusive_target_box, image_objective_for, pgd_ascent, AttackError, AttackKind,
    PerturbationBudget,
};
use crate::boxcodec::{decode_tokens, hit_at_05, BoundingBox};
use crate::gradcore::Tensor;
use crate::grounder::{GrounderError, GrounderModel, TrainConfig};
use crate::scenegen::{generate_dataset, SceneAnnotation, SceneError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("split is empty")]
    EmptySplit,
    #[error("permuted evaluation requires every scene to have >= 2 objects; scene index {0} has {1}")]
    PermutedNeedsTwo(usize, usize),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Model(#[from] GrounderError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("report io at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// What a decoded box is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricTarget {
    /// The prompt's own ground-truth box.
    GroundTruth,
    /// The attack's altered label: shared target box (exclusive) or the
    /// next object's box (permuted).
    AlteredLabel,
}

impl MetricTarget {
    pub fn label(self) -> &'static str {
        match self {
            MetricTarget::GroundTruth => "ground-truth",
            MetricTarget::AlteredLabel => "altered-label",
        }
    }
}

/// One table row: integer counters only; percentage derived at render time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub split: String,
    pub metric_target: MetricTarget,
    pub hits: u64,
    pub total: u64,
    pub degenerate_decodes: u64,
}

impl ReportRow {
    pub fn percentage(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.hits as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
    pub dataset_seed: u64,
    pub train_seed: u64,
    pub tool_version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

/// Full experiment description; hashing it pins provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub attack: AttackKind,
    pub budget: PerturbationBudget,
    pub target_box: Option<BoundingBox>,
    /// Load this checkpoint instead of training when set.
    pub checkpoint: Option<PathBuf>,
    /// After training, save the model here.
    pub save_checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
    pub format: ReportFormat,
}

impl ExperimentConfig {
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex_digest(&h.finalize())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

/// Per-scene evaluation outcome, merged in scene order.
#[derive(Debug, Default, Clone, Copy)]
struct Counters {
    gt_hits: u64,
    altered_hits: u64,
    total: u64,
    degenerate: u64,
}

fn decode_or_miss(model: &GrounderModel, image: &Tensor, prompt: &crate::scenegen::ReferringExpression) -> Result<(Option<BoundingBox>, bool), GrounderError> {
    let seq = model.greedy_decode(image, prompt)?;
    match decode_tokens(&seq) {
        Ok(b) => Ok((Some(b), false)),
        Err(_) => Ok((None, true)),
    }
}

fn evaluate_scene(
    model: &GrounderModel,
    scene: &SceneAnnotation,
    attack: AttackKind,
    budget: &PerturbationBudget,
    target_box: &BoundingBox,
) -> Result<Counters, EvalError> {
    let image: Tensor = match attack {
        AttackKind::None => scene.image.clone(),
        _ => {
            let objective = image_objective_for(attack, model, scene, target_box)?;
            pgd_ascent(model, objective.as_ref(), &scene.image, budget, scene.seed)?.adversarial
        }
    };
    let mut c = Counters::default();
    let n = scene.objects.len();
    for (i, obj) in scene.objects.iter().enumerate() {
        let (decoded, degenerate) = decode_or_miss(model, &image, &obj.prompt)?;
        c.total += 1;
        c.degenerate += degenerate as u64;
        if hit_at_05(decoded.as_ref(), &obj.gt_box) {
            c.gt_hits += 1;
        }
        let altered = match attack {
            AttackKind::Exclusive => Some(target_box.clone()),
            AttackKind::Permuted => Some(scene.objects[(i + 1) % n].gt_box.clone()),
            _ => None,
        };
        if let Some(t) = altered {
            if hit_at_05(decoded.as_ref(), &t) {
                c.altered_hits += 1;
            }
        }
    }
    Ok(c)
}

/// Evaluate a split under one attack kind. Emits a ground-truth row always;
/// for targeted attacks also emits the altered-label row plus the clean
/// no-attack baseline against the same altered labels.
pub fn evaluate(
    model: &GrounderModel,
    split: &[SceneAnnotation],
    split_name: &str,
    attack: AttackKind,
    budget: &PerturbationBudget,
    target_box: &BoundingBox,
) -> Result<Vec<ReportRow>, EvalError> {
    if split.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    if attack == AttackKind::Permuted {
        for (i, s) in split.iter().enumerate() {
            if s.objects.len() < 2 {
                return Err(EvalError::PermutedNeedsTwo(i, s.objects.len()));
            }
        }
    }

    // Scene fan-out; merged in scene order below regardless of completion
    // order, keeping counters deterministic.
    let per_scene: Vec<Result<Counters, EvalError>> = split
        .par_iter()
        .map(|scene| evaluate_scene(model, scene, attack, budget, target_box))
        .collect();
    let mut merged = Counters::default();
    for r in per_scene {
        let c = r?;
        merged.gt_hits += c.gt_hits;
        merged.altered_hits += c.altered_hits;
        merged.total += c.total;
        merged.degenerate += c.degenerate;
    }

    let mut rows = vec![ReportRow {
        method: attack.label().to_string(),
        split: split_name.to_string(),
        metric_target: MetricTarget::GroundTruth,
        hits: merged.gt_hits,
        total: merged.total,
        degenerate_decodes: merged.degenerate,
    }];
    if matches!(attack, AttackKind::Exclusive | AttackKind::Permuted) {
        rows.push(ReportRow {
            method: attack.label().to_string(),
            split: split_name.to_string(),
            metric_target: MetricTarget::AlteredLabel,
            hits: merged.altered_hits,
            total: merged.total,
            degenerate_decodes: merged.degenerate,
        });
        // clean-image baseline against the same altered labels: decode the
        // original image but score against the attack's targets
        let base: Vec<Result<Counters, EvalError>> = split
            .par_iter()
            .map(|scene| {
                let mut c = Counters::default();
                let n = scene.objects.len();
                for (i, obj) in scene.objects.iter().enumerate() {
                    let (decoded, degenerate) =
                        decode_or_miss(model, &scene.image, &obj.prompt)?;
                    c.total += 1;
                    c.degenerate += degenerate as u64;
                    let t = match attack {
                        AttackKind::Exclusive => target_box,
                        _ => &scene.objects[(i + 1) % n].gt_box,
                    };
                    if hit_at_05(decoded.as_ref(), t) {
                        c.altered_hits += 1;
                    }
                }
                Ok(c)
            })
            .collect();
        let mut bmerged = Counters::default();
        for r in base {
            let c = r?;
            bmerged.altered_hits += c.altered_hits;
            bmerged.total += c.total;
            bmerged.degenerate += c.degenerate;
        }
        rows.push(ReportRow {
            method: format!("{} (no attack)", attack.label()),
            split: split_name.to_string(),
            metric_target: MetricTarget::AlteredLabel,
            hits: bmerged.altered_hits,
            total: bmerged.total,
            degenerate_decodes: bmerged.degenerate,
        });
    }
    Ok(rows)
}

/// End-to-end: dataset -> model (load or train) -> clean + attacked rows ->
/// report with provenance. Deterministic in the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport, EvalError> {
    let dataset_seed = cfg.master_seed;
    let (train_split, val_split) =
        generate_dataset(dataset_seed, cfg.train_scenes, cfg.val_scenes)?;

    let model = match &cfg.checkpoint {
        Some(path) => GrounderModel::load(path)?,
        None => {
            let mut m = GrounderModel::init(cfg.train.seed);
            m.train(&train_split, &cfg.train)?;
            if let Some(path) = &cfg.save_checkpoint {
                m.save(path)?;
            }
            m
        }
    };

    let target = cfg
        .target_box
        .clone()
        .unwrap_or_else(exclusive_target_box);

    let mut rows = evaluate(
        &model,
        &val_split,
        "val",
        AttackKind::None,
        &cfg.budget,
        &target,
    )?;
    if cfg.attack != AttackKind::None {
        rows.extend(evaluate(
            &model,
            &val_split,
            "val",
            cfg.attack,
            &cfg.budget,
            &target,
        )?);
    }

    let report = EvalReport {
        rows,
        provenance: Provenance {
            config_hash: cfg.hash(),
            master_seed: cfg.master_seed,
            dataset_seed,
            train_seed: cfg.train.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    };
    if let Some(out) = &cfg.out {
        persist_report(&report, out, cfg.format)?;
    }
    Ok(report)
}

/// Writes the rendered table plus a sibling `<out>.provenance.json`.
pub fn persist_report(
    report: &EvalReport,
    out: &std::path::Path,
    format: ReportFormat,
) -> Result<(), EvalError> {
    let io = |e: std::io::Error| EvalError::Io {
        path: out.display().to_string(),
        source: e,
    };
    std::fs::write(out, render_report(report, format)).map_err(io)?;
    let sibling = out.with_extension(match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{ext}.provenance.json"),
        None => "provenance.json".to_string(),
    });
    let blob = serde_json::to_string_pretty(&report.provenance).expect("provenance serializes");
    std::fs::write(&sibling, blob).map_err(|e| EvalError::Io {
        path: sibling.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Stable column order; percentages to two decimals, computed from the
/// integer counters only here.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut s = String::from("method,split,metric_target,hits,total,iou_at_05_pct,degenerate_decodes\n");
            for r in &report.rows {
                writeln!(
                    s,
                    "{},{},{},{},{},{:.2},{}",
                    r.method,
                    r.split,
                    r.metric_target.label(),
                    r.hits,
                    r.total,
                    r.percentage(),
                    r.degenerate_decodes
                )
                .unwrap();
            }
            s
        }
        ReportFormat::Markdown => {
            let mut s = String::from(
                "| method | split | metric target | hits | total | IoU@0.5 (%) | degenerate |\n|---|---|---|---|---|---|---|\n",
            );
            for r in &report.rows {
                writeln!(
                    s,
                    "| {} | {} | {} | {} | {} | {:.2} | {} |",
                    r.method,
                    r.split,
                    r.metric_target.label(),
                    r.hits,
                    r.total,
                    r.percentage(),
                    r.degenerate_decodes
                )
                .unwrap();
            }
            s
        }
    }
}
