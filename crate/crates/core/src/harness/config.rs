//! Flat `key=value` run configuration.
//!
//! One entry per line; blank lines and lines starting with `#` are ignored.
//! Training keys:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `max_iterations` | 3 | outer decoupling iterations |
//! | `epochs` | 50 | total epochs, split evenly over iterations (remainder to the last) |
//! | `batch_size` | 64 | |
//! | `learning_rate` | 0.001 | plain SGD step size |
//! | `lambda` | 0.005 | weight of the fairness loss |
//! | `pr_c` | 2 | percent of active channels decoupled per iteration |
//! | `epsilon` | 0.0005 | entropic regularisation |
//! | `sinkhorn_max_iter` | 500 | |
//! | `sinkhorn_tol` | 1e-9 | marginal tolerance |
//! | `temperature` | 1 | channel-scoring temperature |
//! | `scoring_batches` | 50 | batches averaged per channel score |
//! | `mode` | `single_group` | or `all_groups` |
//! | `min_cell` | 2 | smallest (group, class) cell aligned in a batch |
//! | `defer_gda` | false | enable the fairness loss only in the last iteration |
//! | `threshold` | 0.5 | decision threshold for evaluation |
//! | `split` | `0.6,0.2,0.2` | train/val/test ratios |
//! | `seed` | 0 | training seed |
//!
//! The generator keys of [`GenConfig`] are accepted in the same file.

use crate::error::{bail, Result};
use crate::gda::{FairnessMode, SinkhornConfig};
use crate::sfd::SnnlParams;
use crate::synth::{parse_num, GenConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub pr_c: f64,
    pub epsilon: f64,
    pub sinkhorn_max_iter: usize,
    pub sinkhorn_tol: f64,
    pub temperature: f64,
    pub scoring_batches: usize,
    pub mode: FairnessMode,
    pub min_cell: usize,
    pub defer_gda: bool,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iterations: 3,
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            lambda: 0.005,
            pr_c: 2.0,
            epsilon: 5e-4,
            sinkhorn_max_iter: 500,
            sinkhorn_tol: 1e-9,
            temperature: 1.0,
            scoring_batches: 50,
            mode: FairnessMode::SingleGroup,
            min_cell: 2,
            defer_gda: false,
            threshold: 0.5,
            seed: 0,
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => bail!(Config, "{key}: expected a boolean, got {other:?}"),
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 16] = [
        "max_iterations",
        "epochs",
        "batch_size",
        "learning_rate",
        "lambda",
        "pr_c",
        "epsilon",
        "sinkhorn_max_iter",
        "sinkhorn_tol",
        "temperature",
        "scoring_batches",
        "mode",
        "min_cell",
        "defer_gda",
        "threshold",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            bail!(Config, "max_iterations must be positive");
        }
        if self.epochs < self.max_iterations {
            bail!(
                Config,
                "{} epochs cannot cover {} iterations",
                self.epochs,
                self.max_iterations
            );
        }
        if self.batch_size == 0 || self.scoring_batches == 0 || self.sinkhorn_max_iter == 0 {
            bail!(Config, "batch_size, scoring_batches and sinkhorn_max_iter must be positive");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            bail!(Config, "learning_rate must be positive");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            bail!(Config, "lambda must be finite and nonnegative");
        }
        if !(0.0..=100.0).contains(&self.pr_c) {
            bail!(Config, "pr_c is a percentage in [0, 100]");
        }
        if !(self.epsilon > 0.0) || !(self.sinkhorn_tol > 0.0) {
            bail!(Config, "epsilon and sinkhorn_tol must be positive");
        }
        if !(self.threshold >= 0.0 && self.threshold <= 1.0) {
            bail!(Config, "threshold must lie in [0, 1]");
        }
        self.snnl().validate()
    }

    /// Epochs run inside each outer iteration.
    pub fn epochs_per_iteration(&self) -> Vec<usize> {
        let it = self.max_iterations.max(1);
        let base = self.epochs / it;
        let mut out = vec![base; it];
        out[it - 1] += self.epochs - base * it;
        out
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.epsilon,
            max_iter: self.sinkhorn_max_iter,
            tol: self.sinkhorn_tol,
        }
    }

    pub fn snnl(&self) -> SnnlParams {
        SnnlParams {
            temperature: self.temperature,
            ..SnnlParams::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "max_iterations" => self.max_iterations = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "pr_c" => self.pr_c = parse_num(key, value)?,
            "epsilon" => self.epsilon = parse_num(key, value)?,
            "sinkhorn_max_iter" => self.sinkhorn_max_iter = parse_num(key, value)?,
            "sinkhorn_tol" => self.sinkhorn_tol = parse_num(key, value)?,
            "temperature" => self.temperature = parse_num(key, value)?,
            "scoring_batches" => self.scoring_batches = parse_num(key, value)?,
            "mode" => self.mode = value.trim().parse()?,
            "min_cell" => self.min_cell = parse_num(key, value)?,
            "defer_gda" => self.defer_gda = parse_bool(key, value)?,
            "threshold" => self.threshold = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("max_iterations".into(), self.max_iterations.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("learning_rate".into(), format!("{}", self.learning_rate)),
            ("lambda".into(), format!("{}", self.lambda)),
            ("pr_c".into(), format!("{}", self.pr_c)),
            ("epsilon".into(), format!("{}", self.epsilon)),
            ("sinkhorn_max_iter".into(), self.sinkhorn_max_iter.to_string()),
            ("sinkhorn_tol".into(), format!("{}", self.sinkhorn_tol)),
            ("temperature".into(), format!("{}", self.temperature)),
            ("scoring_batches".into(), self.scoring_batches.to_string()),
            ("mode".into(), self.mode.to_string()),
            ("min_cell".into(), self.min_cell.to_string()),
            ("defer_gda".into(), self.defer_gda.to_string()),
            ("threshold".into(), format!("{}", self.threshold)),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

/// Training, generator and split settings read from one file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: GenConfig,
    pub split: [f64; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data: GenConfig::default(),
            split: [0.6, 0.2, 0.2],
        }
    }
}

/// Split `key=value` lines into pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!(Config, "line {}: expected key=value, got {line:?}", n + 1);
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn is_key(key: &str) -> bool {
        key == "split" || TrainConfig::KEYS.contains(&key) || GenConfig::KEYS.contains(&key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "split" {
            let parts: Vec<f64> = value
                .split(',')
                .map(|p| parse_num(key, p))
                .collect::<Result<_>>()?;
            self.split = parts
                .try_into()
                .map_err(|_| crate::Error::Config(format!("split needs three ratios, got {value:?}")))?;
            return Ok(());
        }
        if self.train.set(key, value)? || self.data.set(key, value)? {
            return Ok(());
        }
        bail!(Config, "unknown configuration key {key:?}")
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply(&parse_pairs(text)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()?;
        if self.split.iter().any(|r| !(*r >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bail!(Config, "split ratios must be nonnegative and sum to 1");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.train.to_pairs().into_iter().chain(self.data.to_pairs()) {
            out.push_str(&format!("{k}={v}\n"));
        }
        out.push_str(&format!(
            "split={},{},{}\n",
            self.split[0], self.split[1], self.split[2]
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo() {
        let c = TrainConfig::default();
        assert_eq!(c.max_iterations, 3);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.learning_rate, 1e-3);
        assert_eq!(c.lambda, 0.005);
        assert_eq!(c.pr_c, 2.0);
        assert_eq!(c.epsilon, 5e-4);
        assert_eq!(c.mode, FairnessMode::SingleGroup);
        c.validate().unwrap();
    }

    #[test]
    fn epochs_split_with_remainder_last() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs_per_iteration(), vec![16, 16, 18]);
        let c = TrainConfig {
            max_iterations: 1,
            epochs: 7,
            ..Default::default()
        };
        assert_eq!(c.epochs_per_iteration(), vec![7]);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("lambda", "0.01").unwrap();
        cfg.set("leakage", "0.3").unwrap();
        cfg.set("mode", "all_groups").unwrap();
        cfg.set("split", "0.5,0.25,0.25").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_entries_are_config_errors() {
        for text in ["nonsense", "lambda=abc", "unknown_key=1", "mode=sometimes", "defer_gda=maybe"] {
            assert!(matches!(RunConfig::from_text(text), Err(crate::Error::Config(_))), "{text}");
        }
        let mut cfg = RunConfig::default();
        cfg.train.lambda = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let cfg = RunConfig::from_text("# a comment\n\nepochs = 9\n").unwrap();
        assert_eq!(cfg.train.epochs, 9);
    }
}
