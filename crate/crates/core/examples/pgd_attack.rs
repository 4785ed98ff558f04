//! Craft one adversarial image with each objective and show what happens to
//! the predictions.
//!
//! Run: cargo run --release --example pgd_attack

use rec_attack::attacks::{
    exclusive_target_box, image_objective_for, pgd_ascent, AttackKind, PerturbationBudget,
};
use rec_attack::boxcodec::{decode_tokens, iou};
use rec_attack::grounder::{GrounderModel, TrainConfig};
use rec_attack::scenegen::generate_dataset;

fn main() -> anyhow::Result<()> {
    // A lightly trained victim keeps the demo quick; it is competent enough
    // to show each objective moving.
    let (train, val) = generate_dataset(7, 300, 3)?;
    let cfg = TrainConfig {
        epochs: 8,
        ..TrainConfig::default()
    };
    let mut model = GrounderModel::init(cfg.seed);
    model.train(&train, &cfg)?;

    let scene = &val[0];
    let budget = PerturbationBudget::default(); // eps 16/255, alpha 1/255, T=100
    let target = exclusive_target_box();

    for kind in [
        AttackKind::ImageEmbed,
        AttackKind::TextualBox,
        AttackKind::Exclusive,
        AttackKind::Permuted,
    ] {
        let objective = image_objective_for(kind, &model, scene, &target)?;
        let result = pgd_ascent(&model, objective.as_ref(), &scene.image, &budget, scene.seed)?;
        println!(
            "{}: objective {:.4} -> {:.4}, achieved linf {:.6} (eps {:.6})",
            kind.label(),
            result.objective_trace.first().unwrap(),
            result.objective_trace.last().unwrap(),
            result.achieved_linf,
            budget.epsilon
        );
        for obj in &scene.objects {
            let clean = decode_tokens(&model.greedy_decode(&scene.image, &obj.prompt)?).ok();
            let adv = decode_tokens(&model.greedy_decode(&result.adversarial, &obj.prompt)?).ok();
            let iou_clean = clean.map(|b| iou(&b, &obj.gt_box)).unwrap_or(0.0);
            let iou_adv = adv.map(|b| iou(&b, &obj.gt_box)).unwrap_or(0.0);
            println!(
                "  \"{}\": IoU vs ground truth {iou_clean:.3} -> {iou_adv:.3}",
                obj.prompt.text()
            );
        }
    }
    Ok(())
}
