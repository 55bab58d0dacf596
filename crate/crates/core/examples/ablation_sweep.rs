//! Sweep the fairness weight and print one row per cell.

use fairdetect::harness::{make_splits, sweep, SweepGrid, TrainConfig};
use fairdetect::metrics::Axis;
use fairdetect::synth::{generate, GenConfig};
use fairdetect::Result;

fn main() -> Result<()> {
    let data = generate(&GenConfig::default())?;
    let splits = make_splits(&data, [0.6, 0.2, 0.2])?;
    let base = TrainConfig {
        epochs: 20,
        learning_rate: 0.1,
        pr_c: 0.0,
        ..Default::default()
    };
    let grid = SweepGrid::Lambda(vec![0.0, 0.005, 0.5, 5.0, 50.0]);
    println!("lambda  AUC     F_FPR   F_DP   (intersection)");
    for row in sweep(&base, &grid, &splits.train, &splits.test)? {
        match &row.outcome {
            Ok(rep) => {
                let a = rep.axis(Axis::Intersection).expect("intersection axis");
                println!("{:<7} {:.4}  {:.4}  {:.4}", row.lambda, rep.auc, a.f_fpr, a.f_dp);
            }
            Err(msg) => println!("{:<7} failed: {msg}", row.lambda),
        }
    }
    Ok(())
}
