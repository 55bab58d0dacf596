use std::collections::BTreeMap;

use crate::detector::{ChannelMask, Detector};
use crate::error::{bail, Result};
use crate::metrics::{report, Axis, LabeledScores, MetricsReport};
use crate::synth::{perturb, Dataset, PerturbKind};

use super::train::rng_stream;

const CHUNK: usize = 256;

/// Fake probabilities of every sample under the masked detector.
pub fn predict(detector: &Detector, mask: &ChannelMask, data: &Dataset) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(CHUNK) {
        out.extend(detector.forward(&data.images(chunk)?, mask)?.fake_prob);
    }
    Ok(out)
}

/// Metrics over the gender, race and intersection axes.
pub fn evaluate(detector: &Detector, mask: &ChannelMask, data: &Dataset, threshold: f64) -> Result<MetricsReport> {
    if data.is_empty() {
        bail!(Data, "evaluation split is empty");
    }
    let scores = predict(detector, mask, data)?;
    let labels: Vec<u8> = data.samples.iter().map(|s| s.label).collect();
    let subgroups = |axis: Axis| data.axis_ids(axis);
    report(
        &LabeledScores {
            scores: &scores,
            labels: &labels,
            subgroups: &subgroups,
        },
        &Axis::ALL,
        threshold,
    )
}

/// Copy of `data` with every image distorted. Samples are processed in
/// order from one ChaCha stream seeded with `seed`.
pub fn perturb_dataset(data: &Dataset, kind: PerturbKind, intensity: f64, seed: u64) -> Result<Dataset> {
    let mut rng = rng_stream(seed, 0);
    let mut out = data.clone();
    for s in &mut out.samples {
        s.image = perturb(&s.image, data.height, data.width, kind, intensity, &mut rng)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub kind: PerturbKind,
    pub intensity: f64,
    pub report: MetricsReport,
    /// Perturbed minus clean, per axis.
    pub delta_f_fpr: BTreeMap<Axis, f64>,
    pub delta_es_auc: BTreeMap<Axis, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    pub clean: MetricsReport,
    pub rows: Vec<RobustnessRow>,
}

/// One full report per (kind, intensity) with deltas against the clean split.
pub fn robustness_eval(
    detector: &Detector,
    mask: &ChannelMask,
    data: &Dataset,
    kinds: &[PerturbKind],
    intensities: &[f64],
    threshold: f64,
    seed: u64,
) -> Result<RobustnessReport> {
    if intensities.windows(2).any(|w| !(w[0] <= w[1])) {
        bail!(Usage, "intensities must be sorted ascending");
    }
    let clean = evaluate(detector, mask, data, threshold)?;
    let mut rows = Vec::with_capacity(kinds.len() * intensities.len());
    for &kind in kinds {
        for &intensity in intensities {
            let noisy = perturb_dataset(data, kind, intensity, seed)?;
            let report = evaluate(detector, mask, &noisy, threshold)?;
            let mut delta_f_fpr = BTreeMap::new();
            let mut delta_es_auc = BTreeMap::new();
            for (axis, a) in &report.axes {
                if let Some(c) = clean.axes.get(axis) {
                    delta_f_fpr.insert(*axis, a.f_fpr - c.f_fpr);
                    delta_es_auc.insert(*axis, a.es_auc - c.es_auc);
                }
            }
            rows.push(RobustnessRow {
                kind,
                intensity,
                report,
                delta_f_fpr,
                delta_es_auc,
            });
        }
    }
    Ok(RobustnessReport { clean, rows })
}

impl RobustnessReport {
    /// CSV `kind,intensity,axis,auc,f_fpr,es_auc,delta_f_fpr,delta_es_auc`.
    pub fn write_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["kind", "intensity", "axis", "auc", "f_fpr", "es_auc", "delta_f_fpr", "delta_es_auc"])?;
        for r in &self.rows {
            for (axis, a) in &r.report.axes {
                out.write_record([
                    r.kind.code().to_string(),
                    format!("{}", r.intensity),
                    axis.name().to_string(),
                    format!("{:.6}", r.report.auc),
                    format!("{:.6}", a.f_fpr),
                    format!("{:.6}", a.es_auc),
                    format!("{:.6}", r.delta_f_fpr[axis]),
                    format!("{:.6}", r.delta_es_auc[axis]),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::synth::{generate, GenConfig};

    fn setup() -> (Detector, ChannelMask, Dataset) {
        let d = generate(&GenConfig {
            count: 160,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let det = Detector::new(DetectorConfig::default(), 4).unwrap();
        (det, ChannelMask::all_active(16), d)
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (det, mask, d) = setup();
        let a = evaluate(&det, &mask, &d, 0.5).unwrap();
        let b = evaluate(&det, &mask, &d, 0.5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.axes.len(), 3);
    }

    #[test]
    fn zero_intensity_has_zero_deltas() {
        let (det, mask, d) = setup();
        let r = robustness_eval(&det, &mask, &d, &[PerturbKind::GaussianNoise, PerturbKind::GaussianBlur], &[0.0], 0.5, 1).unwrap();
        assert_eq!(r.rows.len(), 2);
        for row in &r.rows {
            assert!(row.delta_f_fpr.values().all(|v| *v == 0.0));
            assert!(row.delta_es_auc.values().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn one_row_per_kind_and_intensity() {
        let (det, mask, d) = setup();
        let kinds = [PerturbKind::GaussianNoise, PerturbKind::BlockNoise];
        let r = robustness_eval(&det, &mask, &d, &kinds, &[0.0, 0.05, 0.1], 0.5, 1).unwrap();
        let shape: Vec<(PerturbKind, f64)> = r.rows.iter().map(|x| (x.kind, x.intensity)).collect();
        assert_eq!(shape.len(), 6);
        assert_eq!(shape[4], (PerturbKind::BlockNoise, 0.05));
        assert!(robustness_eval(&det, &mask, &d, &kinds, &[0.1, 0.0], 0.5, 1).is_err());
    }

    #[test]
    fn empty_split_is_a_data_error() {
        let (det, mask, d) = setup();
        assert!(matches!(evaluate(&det, &mask, &d.subset(&[]), 0.5), Err(crate::Error::Data(_))));
    }
}
