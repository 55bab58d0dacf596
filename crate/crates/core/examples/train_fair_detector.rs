//! Train a baseline and a fair detector on the same split and compare
//! accuracy and fairness on the test set.

use fairdetect::harness::{evaluate, make_splits, train, TrainConfig};
use fairdetect::metrics::Axis;
use fairdetect::synth::{generate, GenConfig};
use fairdetect::Result;

fn main() -> Result<()> {
    let data = generate(&GenConfig::default())?;
    let splits = make_splits(&data, [0.6, 0.2, 0.2])?;
    let fair = TrainConfig {
        epochs: 30,
        learning_rate: 0.1,
        ..Default::default()
    };
    let base = TrainConfig {
        lambda: 0.0,
        pr_c: 0.0,
        ..fair.clone()
    };
    for (name, cfg) in [("baseline", &base), ("fair", &fair)] {
        let model = train(cfg, &splits.train)?;
        let rep = evaluate(&model.detector, &model.mask, &splits.test, cfg.threshold)?;
        let inter = rep.axis(Axis::Intersection).expect("intersection axis");
        println!(
            "{name:<8} AUC {:.4}  F_FPR {:.4}  F_DP {:.4}  es-AUC {:.4}  decoupled {:?}",
            rep.auc,
            inter.f_fpr,
            inter.f_dp,
            inter.es_auc,
            model.mask.decoupled()
        );
    }
    Ok(())
}
