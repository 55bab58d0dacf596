//! Detection and group-fairness metrics.
//!
//! - `AUC`: Mann-Whitney statistic with average ranks for ties.
//! - `F_FPR`: `Σ_j |FPR(J_j) − FPR(all)|`.
//! - `F_DP`: `max_k (max_j rate_j(k) − min_j rate_j(k))`, `rate_j(k)` the
//!   fraction of subgroup `j` predicted `k`.
//! - `es-AUC`: `AUC / (1 + Σ_j |AUC − AUC_j|)`.
//!
//! Subgroups where a metric is undefined are dropped from that metric and
//! listed in the returned warnings.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// One scored sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub score: f64,
    pub pred: u8,
    pub label: u8,
    pub subgroup: u32,
}

impl EvalRecord {
    pub fn new(score: f64, label: u8, subgroup: u32, threshold: f64) -> Self {
        EvalRecord {
            score,
            pred: u8::from(score >= threshold),
            label,
            subgroup,
        }
    }
}

/// Area under the ROC curve via average ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        bail!(Dimension, "{} scores for {} labels", scores.len(), labels.len());
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        bail!(UndefinedMetric, "AUC needs both classes ({n_pos} positive, {n_neg} negative)");
    }
    if scores.iter().any(|s| s.is_nan()) {
        bail!(Numeric, "NaN score");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

fn by_subgroup(records: &[EvalRecord]) -> BTreeMap<u32, Vec<EvalRecord>> {
    let mut m: BTreeMap<u32, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.subgroup).or_default().push(*r);
    }
    m
}

fn fpr(records: &[EvalRecord]) -> Option<f64> {
    let negatives = records.iter().filter(|r| r.label == 0).count();
    if negatives == 0 {
        return None;
    }
    let fp = records.iter().filter(|r| r.label == 0 && r.pred == 1).count();
    Some(fp as f64 / negatives as f64)
}

/// A metric value plus the subgroups it had to leave out.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub warnings: Vec<String>,
}

pub fn f_fpr(records: &[EvalRecord]) -> Result<MetricValue> {
    let Some(overall) = fpr(records) else {
        bail!(UndefinedMetric, "F_FPR needs at least one true negative");
    };
    let mut warnings = Vec::new();
    let mut total = 0.0;
    for (g, rs) in by_subgroup(records) {
        match fpr(&rs) {
            Some(f) => total += (f - overall).abs(),
            None => warnings.push(format!("F_FPR: subgroup {g} has no true negatives")),
        }
    }
    Ok(MetricValue { value: total, warnings })
}

pub fn f_dp(records: &[EvalRecord]) -> Result<MetricValue> {
    if records.is_empty() {
        bail!(UndefinedMetric, "F_DP of an empty record set");
    }
    let groups = by_subgroup(records);
    let mut worst: f64 = 0.0;
    for k in [0u8, 1] {
        // Counted per class rather than as 1 - rate, so both classes are exact quotients.
        let of_k = groups
            .values()
            .map(|rs| rs.iter().filter(|r| r.pred == k).count() as f64 / rs.len() as f64);
        let hi = of_k.clone().fold(f64::NEG_INFINITY, f64::max);
        let lo = of_k.fold(f64::INFINITY, f64::min);
        worst = worst.max(hi - lo);
    }
    Ok(MetricValue {
        value: worst,
        warnings: Vec::new(),
    })
}

fn split_scores(records: &[EvalRecord]) -> (Vec<f64>, Vec<u8>) {
    records.iter().map(|r| (r.score, r.label)).unzip()
}

/// Overall AUC and the AUC of every subgroup that has both classes.
pub fn subgroup_aucs(records: &[EvalRecord]) -> Result<(f64, BTreeMap<u32, f64>, Vec<String>)> {
    let (s, l) = split_scores(records);
    let overall = auc(&s, &l)?;
    let mut per = BTreeMap::new();
    let mut warnings = Vec::new();
    for (g, rs) in by_subgroup(records) {
        let (s, l) = split_scores(&rs);
        match auc(&s, &l) {
            Ok(a) => {
                per.insert(g, a);
            }
            Err(crate::Error::UndefinedMetric(_)) => {
                warnings.push(format!("es-AUC: subgroup {g} lacks one class"));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((overall, per, warnings))
}

pub fn es_auc(records: &[EvalRecord]) -> Result<MetricValue> {
    let (overall, per, warnings) = subgroup_aucs(records)?;
    let disparity: f64 = per.values().map(|a| (overall - a).abs()).sum();
    Ok(MetricValue {
        value: overall / (1.0 + disparity),
        warnings,
    })
}

/// Demographic axis a report block is computed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Gender,
    Race,
    Intersection,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Gender, Axis::Race, Axis::Intersection];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Gender => "gender",
            Axis::Race => "race",
            Axis::Intersection => "intersection",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gender" => Ok(Axis::Gender),
            "race" => Ok(Axis::Race),
            "intersection" => Ok(Axis::Intersection),
            other => bail!(Usage, "unknown axis {other:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupStats {
    pub count: usize,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisReport {
    pub f_fpr: f64,
    pub f_dp: f64,
    pub es_auc: f64,
    pub subgroups: BTreeMap<u32, SubgroupStats>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub threshold: f64,
    pub n: usize,
    pub axes: BTreeMap<Axis, AxisReport>,
}

/// Scores and labels with one subgroup id per requested axis.
pub struct LabeledScores<'a> {
    pub scores: &'a [f64],
    pub labels: &'a [u8],
    /// `subgroups(axis)[i]` is sample `i`'s subgroup on that axis.
    pub subgroups: &'a dyn Fn(Axis) -> Vec<u32>,
}

pub fn axis_report(records: &[EvalRecord]) -> Result<AxisReport> {
    let fpr = f_fpr(records)?;
    let dp = f_dp(records)?;
    let (overall, per, auc_warn) = subgroup_aucs(records)?;
    let disparity: f64 = per.values().map(|a| (overall - a).abs()).sum();
    let mut subgroups = BTreeMap::new();
    for (g, rs) in by_subgroup(records) {
        subgroups.insert(
            g,
            SubgroupStats {
                count: rs.len(),
                auc: per.get(&g).copied(),
            },
        );
    }
    let mut warnings = fpr.warnings;
    warnings.extend(dp.warnings);
    warnings.extend(auc_warn);
    Ok(AxisReport {
        f_fpr: fpr.value,
        f_dp: dp.value,
        es_auc: overall / (1.0 + disparity),
        subgroups,
        warnings,
    })
}

/// One metric block per axis.
pub fn report(input: &LabeledScores<'_>, axes: &[Axis], threshold: f64) -> Result<MetricsReport> {
    let n = input.scores.len();
    if n == 0 {
        bail!(Data, "cannot report metrics on an empty dataset");
    }
    if input.labels.len() != n {
        bail!(Dimension, "{n} scores for {} labels", input.labels.len());
    }
    let overall = auc(input.scores, input.labels)?;
    let mut blocks = BTreeMap::new();
    for &axis in axes {
        let ids = (input.subgroups)(axis);
        if ids.len() != n {
            bail!(Dimension, "axis {} has {} ids for {n} samples", axis.name(), ids.len());
        }
        let records: Vec<EvalRecord> = (0..n)
            .map(|i| EvalRecord::new(input.scores[i], input.labels[i], ids[i], threshold))
            .collect();
        blocks.insert(axis, axis_report(&records)?);
    }
    Ok(MetricsReport {
        auc: overall,
        threshold,
        n,
        axes: blocks,
    })
}

impl MetricsReport {
    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// Flat rows `axis,metric,value`; the overall AUC is on axis `all`.
    pub fn csv_rows(&self) -> Vec<(String, String, f64)> {
        let mut rows = vec![("all".to_string(), "auc".to_string(), self.auc)];
        for (axis, block) in &self.axes {
            for (metric, v) in [("f_fpr", block.f_fpr), ("f_dp", block.f_dp), ("es_auc", block.es_auc)] {
                rows.push((axis.name().to_string(), metric.to_string(), v));
            }
        }
        rows
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["axis", "metric", "value"])?;
        for (a, m, v) in self.csv_rows() {
            out.write_record([a, m, format!("{v:.17e}")])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn axis(&self, axis: Axis) -> Option<&AxisReport> {
        self.axes.get(&axis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(pred: u8, label: u8, g: u32) -> EvalRecord {
        EvalRecord {
            score: f64::from(pred),
            pred,
            label,
            subgroup: g,
        }
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(crate::Error::UndefinedMetric(_))));
    }

    #[test]
    fn f_fpr_counting_example() {
        let rs = vec![rec(1, 0, 0), rec(0, 0, 0), rec(0, 0, 1), rec(0, 0, 1)];
        assert_eq!(f_fpr(&rs).unwrap().value, 0.5);
        let single = vec![rec(1, 0, 0), rec(0, 0, 0)];
        assert_eq!(f_fpr(&single).unwrap().value, 0.0);
    }

    #[test]
    fn f_fpr_warns_on_positive_only_group() {
        let rs = vec![rec(1, 0, 0), rec(0, 0, 0), rec(1, 1, 1)];
        let m = f_fpr(&rs).unwrap();
        assert_eq!(m.value, 0.0);
        assert_eq!(m.warnings.len(), 1);
    }

    #[test]
    fn f_dp_counting_example() {
        let mut rs = Vec::new();
        for (i, p) in [1, 1, 1, 0].iter().enumerate() {
            rs.push(rec(*p, (i % 2) as u8, 0));
        }
        for (i, p) in [1, 0, 0, 0].iter().enumerate() {
            rs.push(rec(*p, (i % 2) as u8, 1));
        }
        assert_eq!(f_dp(&rs).unwrap().value, 0.5);
        assert_eq!(f_dp(&rs[..4]).unwrap().value, 0.0);
    }

    #[test]
    fn es_auc_arithmetic() {
        let v: f64 = 0.9 / (1.0 + 0.1 + 0.05);
        assert!((v - 0.782_608_695_652_174).abs() < 1e-12);
    }

    #[test]
    fn es_auc_all_ties() {
        let rs: Vec<EvalRecord> = (0..8)
            .map(|i| EvalRecord::new(0.3, (i % 2) as u8, (i / 4) as u32, 0.5))
            .collect();
        assert_eq!(es_auc(&rs).unwrap().value, 0.5);
    }

    #[test]
    fn report_single_group_axes() {
        let scores = [0.2, 0.7, 0.4, 0.9];
        let labels = [0u8, 1, 0, 1];
        let ids = |_: Axis| vec![0u32; 4];
        let r = report(
            &LabeledScores {
                scores: &scores,
                labels: &labels,
                subgroups: &ids,
            },
            &Axis::ALL,
            0.5,
        )
        .unwrap();
        for axis in Axis::ALL {
            let b = r.axis(axis).unwrap();
            assert_eq!(b.f_fpr, 0.0);
            assert_eq!(b.f_dp, 0.0);
            assert_eq!(b.es_auc, r.auc);
        }
        let mut json = Vec::new();
        r.write_json(&mut json).unwrap();
        let back: MetricsReport = serde_json::from_slice(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.csv_rows().len(), 10);
    }

    #[test]
    fn report_on_empty_dataset_fails() {
        let ids = |_: Axis| vec![];
        assert!(report(
            &LabeledScores {
                scores: &[],
                labels: &[],
                subgroups: &ids,
            },
            &Axis::ALL,
            0.5
        )
        .is_err());
    }
}
