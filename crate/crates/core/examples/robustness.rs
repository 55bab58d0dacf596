//! Evaluate a trained detector under increasing distortion and print the
//! change in fairness against the clean test set.

use fairdetect::harness::{make_splits, robustness_eval, train, TrainConfig};
use fairdetect::metrics::Axis;
use fairdetect::synth::{generate, GenConfig, PerturbKind};
use fairdetect::Result;

fn main() -> Result<()> {
    let data = generate(&GenConfig {
        count: 1500,
        ..Default::default()
    })?;
    let splits = make_splits(&data, [0.6, 0.2, 0.2])?;
    let cfg = TrainConfig {
        epochs: 10,
        learning_rate: 0.1,
        ..Default::default()
    };
    let model = train(&cfg, &splits.train)?;
    let kinds = [PerturbKind::GaussianNoise, PerturbKind::GaussianBlur, PerturbKind::BlockNoise];
    let rep = robustness_eval(&model.detector, &model.mask, &splits.test, &kinds, &[0.0, 0.1, 0.5, 1.0], cfg.threshold, 0)?;
    println!("clean AUC {:.4}", rep.clean.auc);
    for row in &rep.rows {
        println!(
            "{:<4} {:<4} AUC {:.4}  dF_FPR {:+.4}  des-AUC {:+.4}",
            row.kind.code(),
            row.intensity,
            row.report.auc,
            row.delta_f_fpr[&Axis::Intersection],
            row.delta_es_auc[&Axis::Intersection]
        );
    }
    Ok(())
}
