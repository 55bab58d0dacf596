//! Training, evaluation, sweeps and run-directory output.
//!
//! A run directory holds:
//!
//! - `config.txt`: the effective configuration as `key=value` lines
//! - `model.ckpt`: detector weights and channel mask
//! - `history.csv`: per-step losses
//! - `iterations.csv`: channel scores and selections per outer iteration
//! - `fairness_trace.csv`: per-step transport costs
//! - `metrics.json`: test-split report
//! - `warnings.log`

pub mod config;
pub mod eval;
pub mod sweep;
pub mod train;

use std::path::Path;

pub use config::{RunConfig, TrainConfig};
pub use eval::{evaluate, perturb_dataset, predict, robustness_eval, RobustnessReport, RobustnessRow};
pub use sweep::{sweep, write_sweep_csv, SweepGrid, SweepRow};
pub use train::{train, IterationRecord, StepRecord, TrainHistory, TrainedModel};

use crate::error::Result;
use crate::gda::write_trace;
use crate::metrics::MetricsReport;
use crate::synth::{generate, split, Dataset};

/// The train, validation and test subsets of one generated dataset.
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn make_splits(data: &Dataset, ratios: [f64; 3]) -> Result<Splits> {
    let idx = split(data, ratios, data.config.seed)?;
    Ok(Splits {
        train: data.subset(&idx.train),
        val: data.subset(&idx.val),
        test: data.subset(&idx.test),
    })
}

/// Generate the configured dataset and split it.
pub fn prepare(cfg: &RunConfig) -> Result<Splits> {
    make_splits(&generate(&cfg.data)?, cfg.split)
}

/// Write every artifact of a finished run into `dir`.
pub fn write_run_dir(dir: &Path, cfg: &RunConfig, model: &TrainedModel, metrics: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    model.detector.save(&model.mask, &dir.join("model.ckpt"))?;
    model
        .history
        .write_steps_csv(std::fs::File::create(dir.join("history.csv"))?)?;
    model
        .history
        .write_iterations_csv(std::fs::File::create(dir.join("iterations.csv"))?)?;
    write_trace(&model.history.trace, std::fs::File::create(dir.join("fairness_trace.csv"))?)?;
    metrics.write_json(std::fs::File::create(dir.join("metrics.json"))?)?;
    let mut warnings: Vec<String> = model.history.warnings.clone();
    for (axis, a) in &metrics.axes {
        warnings.extend(a.warnings.iter().map(|w| format!("{}: {w}", axis.name())));
    }
    warnings.push(format!("wall clock {:.2}s", model.history.wall_clock_secs));
    std::fs::write(dir.join("warnings.log"), warnings.join("\n") + "\n")?;
    Ok(())
}
