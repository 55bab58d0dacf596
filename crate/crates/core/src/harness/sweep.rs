use std::io::Write;

use super::config::TrainConfig;
use super::eval::evaluate;
use super::train::train;
use crate::error::{bail, Result};
use crate::metrics::{Axis, MetricsReport};
use crate::synth::Dataset;

#[derive(Clone, Debug, PartialEq)]
pub enum SweepGrid {
    /// Every `pr_c` paired with every iteration count.
    Decoupling { pr_c: Vec<f64>, iterations: Vec<usize> },
    /// Fairness weights, run in ascending order.
    Lambda(Vec<f64>),
}

impl SweepGrid {
    pub fn cells(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        match self {
            SweepGrid::Decoupling { pr_c, iterations } => pr_c
                .iter()
                .flat_map(|&p| {
                    iterations.iter().map(move |&it| TrainConfig {
                        pr_c: p,
                        max_iterations: it,
                        ..base.clone()
                    })
                })
                .collect(),
            SweepGrid::Lambda(lambdas) => {
                let mut sorted = lambdas.clone();
                sorted.sort_by(f64::total_cmp);
                sorted
                    .into_iter()
                    .map(|l| TrainConfig {
                        lambda: l,
                        ..base.clone()
                    })
                    .collect()
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            SweepGrid::Decoupling { pr_c, iterations } => pr_c.is_empty() || iterations.is_empty(),
            SweepGrid::Lambda(l) => l.is_empty(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub pr_c: f64,
    pub iterations: usize,
    pub lambda: f64,
    /// `Err` holds the failure message of this cell.
    pub outcome: std::result::Result<MetricsReport, String>,
}

impl SweepRow {
    pub fn f_fpr(&self, axis: Axis) -> Option<f64> {
        self.outcome.as_ref().ok().and_then(|r| r.axis(axis)).map(|a| a.f_fpr)
    }

    pub fn auc(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|r| r.auc)
    }
}

/// Train on `train_data` and evaluate on `eval_data` once per grid cell,
/// all with the base seed. A failing cell is recorded and the sweep goes on.
pub fn sweep(base: &TrainConfig, grid: &SweepGrid, train_data: &Dataset, eval_data: &Dataset) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        bail!(Config, "sweep grid is empty");
    }
    let rows = grid
        .cells(base)
        .into_iter()
        .map(|cfg| {
            let outcome = train(&cfg, train_data)
                .and_then(|m| evaluate(&m.detector, &m.mask, eval_data, cfg.threshold))
                .map_err(|e| e.to_string());
            SweepRow {
                pr_c: cfg.pr_c,
                iterations: cfg.max_iterations,
                lambda: cfg.lambda,
                outcome,
            }
        })
        .collect();
    Ok(rows)
}

/// CSV with one row per cell; failed cells keep their coordinates, carry
/// `status=failed` and leave the metric fields empty.
pub fn write_sweep_csv(rows: &[SweepRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "pr_c",
        "iterations",
        "lambda",
        "status",
        "auc",
        "f_fpr_gender",
        "f_fpr_race",
        "f_fpr_intersection",
        "f_dp_intersection",
        "es_auc_intersection",
    ])?;
    for r in rows {
        let mut rec = vec![format!("{}", r.pr_c), r.iterations.to_string(), format!("{}", r.lambda)];
        match &r.outcome {
            Ok(rep) => {
                rec.push("ok".into());
                rec.push(format!("{:.6}", rep.auc));
                for axis in Axis::ALL {
                    rec.push(rep.axis(axis).map(|a| format!("{:.6}", a.f_fpr)).unwrap_or_default());
                }
                let inter = rep.axis(Axis::Intersection);
                rec.push(inter.map(|a| format!("{:.6}", a.f_dp)).unwrap_or_default());
                rec.push(inter.map(|a| format!("{:.6}", a.es_auc)).unwrap_or_default());
            }
            Err(_) => {
                rec.push("failed".into());
                rec.extend(std::iter::repeat_n(String::new(), 6));
            }
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoupling_grid_is_a_full_product() {
        let grid = SweepGrid::Decoupling {
            pr_c: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            iterations: vec![1, 2, 3, 4, 5],
        };
        let cells = grid.cells(&TrainConfig::default());
        assert_eq!(cells.len(), 25);
        assert_eq!((cells[7].pr_c, cells[7].max_iterations), (2.0, 3));
    }

    #[test]
    fn lambda_cells_are_sorted() {
        let cells = SweepGrid::Lambda(vec![0.01, 0.0, 0.005]).cells(&TrainConfig::default());
        let l: Vec<f64> = cells.iter().map(|c| c.lambda).collect();
        assert_eq!(l, vec![0.0, 0.005, 0.01]);
    }

    #[test]
    fn failed_cells_are_marked() {
        let rows = vec![SweepRow {
            pr_c: 1.0,
            iterations: 2,
            lambda: 0.0,
            outcome: Err("boom".into()),
        }];
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("1,2,0,failed,"));
    }

    #[test]
    fn empty_grid_is_rejected() {
        let d = crate::synth::generate(&crate::synth::GenConfig {
            count: 16,
            ..Default::default()
        })
        .unwrap();
        let grid = SweepGrid::Lambda(vec![]);
        assert!(sweep(&TrainConfig::default(), &grid, &d, &d).is_err());
    }
}
