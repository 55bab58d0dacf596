//! Channel sensitivity scoring and decoupling.
//!
//! For each last-layer channel `k` and batch `t`, the soft-nearest-neighbour
//! loss over sensitive-group labels is
//!
//! ```text
//! l(k,t) = -1/b Σ_i log( Σ_{x≠i, a_x=a_i} exp(-|m_i - m_x|² / T)
//!                        / Σ_{y≠i}         exp(-|m_i - m_y|² / T) )
//! ```
//!
//! where `m_i` is sample `i`'s flattened channel-`k` map. The fairness index
//! `F_k` is the mean of `|l(k,t)|` over batches. Low `F_k` means same-group
//! samples are each other's nearest neighbours in that channel, so the
//! channel encodes the sensitive attribute; those channels are decoupled.

use std::io::Write;

use crate::detector::{ChannelMask, Detector};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnnlParams {
    pub temperature: f64,
    /// Lower clamp applied to the neighbour ratio before the logarithm.
    pub clamp: f64,
}

impl Default for SnnlParams {
    fn default() -> Self {
        SnnlParams {
            temperature: 1.0,
            clamp: 1e-12,
        }
    }
}

impl SnnlParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            bail!(Config, "SNNL temperature must be positive, got {}", self.temperature);
        }
        if !(self.clamp > 0.0 && self.clamp < 1.0) {
            bail!(Config, "SNNL clamp must lie in (0, 1), got {}", self.clamp);
        }
        Ok(())
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + values.map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Soft nearest neighbour loss of one channel over one batch.
///
/// `rows[i]` is sample `i`'s flattened map, `groups[i]` its group id. A
/// sample without a same-group peer contributes `-log(clamp)`. Sums are
/// taken in the log domain, so large distances do not underflow.
pub fn snnl_channel<R: AsRef<[f64]>>(rows: &[R], groups: &[u32], params: &SnnlParams) -> Result<f64> {
    params.validate()?;
    let b = rows.len();
    if b < 2 {
        bail!(Domain, "SNNL needs at least two samples, got {b}");
    }
    if groups.len() != b {
        bail!(Dimension, "{} group ids for {b} samples", groups.len());
    }
    let dim = rows[0].as_ref().len();
    for r in rows {
        let r = r.as_ref();
        if r.len() != dim {
            bail!(Dimension, "ragged channel rows");
        }
        if r.iter().any(|v| !v.is_finite()) {
            bail!(Numeric, "non-finite channel feature");
        }
    }
    let mut neg_dist = vec![0.0; b * b];
    for i in 0..b {
        for j in (i + 1)..b {
            let d: f64 = rows[i]
                .as_ref()
                .iter()
                .zip(rows[j].as_ref())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            neg_dist[i * b + j] = -d / params.temperature;
            neg_dist[j * b + i] = -d / params.temperature;
        }
    }
    let mut total = 0.0;
    for i in 0..b {
        let row = &neg_dist[i * b..(i + 1) * b];
        let others = (0..b).filter(move |&j| j != i);
        let same = others.clone().filter(|&j| groups[j] == groups[i]);
        let ratio = if same.clone().next().is_none() {
            0.0
        } else {
            let log_ratio = log_sum_exp(same.map(|j| row[j])) - log_sum_exp(others.map(|j| row[j]));
            log_ratio.exp().min(1.0)
        };
        total += ratio.max(params.clamp).ln();
    }
    Ok(-total / b as f64)
}

/// Per-channel batch losses and the resulting fairness indices.
#[derive(Clone, Debug, PartialEq)]
pub struct FairnessIndexTable {
    /// `losses[k][t]`; empty for channels that were not scored.
    pub losses: Vec<Vec<f64>>,
    /// `F_k`, `None` for channels that were not scored.
    pub index: Vec<Option<f64>>,
    pub n_batches: usize,
}

impl FairnessIndexTable {
    pub fn channels(&self) -> usize {
        self.index.len()
    }

    /// Write `channel_index,F_k,decoupled_flag` rows; unscored channels
    /// leave `F_k` empty.
    pub fn write_csv(&self, mask: &ChannelMask, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["channel_index", "F_k", "decoupled_flag"])?;
        for (k, f) in self.index.iter().enumerate() {
            let score = f.map(|v| format!("{v:.17e}")).unwrap_or_default();
            let flag = if mask.is_active(k) { "0" } else { "1" };
            out.write_record([k.to_string(), score, flag.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `F_k = (1/N_b) Σ_t |l(k,t)|` for every channel.
pub fn fairness_index(per_batch: &[Vec<f64>]) -> Result<FairnessIndexTable> {
    let n = per_batch.first().map_or(0, Vec::len);
    if n == 0 {
        bail!(Domain, "fairness index needs at least one batch");
    }
    if per_batch.iter().any(|l| l.len() != n) {
        bail!(Dimension, "unequal batch counts across channels");
    }
    let index = per_batch
        .iter()
        .map(|l| Some(l.iter().map(|v| v.abs()).sum::<f64>() / n as f64))
        .collect();
    Ok(FairnessIndexTable {
        losses: per_batch.to_vec(),
        index,
        n_batches: n,
    })
}

/// Score every active channel of `detector` over the given batches.
///
/// Each batch is `(images, group ids)`. Decoupled channels are skipped and
/// get `None`. Batches with fewer than two samples are ignored.
pub fn estimate_fairness_index<I>(
    detector: &Detector,
    mask: &ChannelMask,
    batches: I,
    params: &SnnlParams,
) -> Result<FairnessIndexTable>
where
    I: IntoIterator<Item = (Tensor, Vec<u32>)>,
{
    let c = mask.channels();
    let mut losses: Vec<Vec<f64>> = vec![Vec::new(); c];
    let mut n_batches = 0;
    for (images, groups) in batches {
        if groups.len() < 2 {
            continue;
        }
        let features = detector.features(&images)?;
        for (k, slot) in losses.iter_mut().enumerate() {
            if mask.is_active(k) {
                slot.push(snnl_channel(&features.channel_rows(k), &groups, params)?);
            }
        }
        n_batches += 1;
    }
    if n_batches == 0 {
        bail!(Domain, "no usable batches for channel scoring");
    }
    let index = losses
        .iter()
        .enumerate()
        .map(|(k, l)| {
            mask.is_active(k)
                .then(|| l.iter().map(|v| v.abs()).sum::<f64>() / n_batches as f64)
        })
        .collect();
    Ok(FairnessIndexTable {
        losses,
        index,
        n_batches,
    })
}

/// Number of channels one selection round decouples.
///
/// `floor(pr_c/100 · active)`, at least one when `pr_c > 0`, and never the
/// last active channel.
pub fn decouple_count(pr_c: f64, active: usize) -> usize {
    if pr_c <= 0.0 || active <= 1 {
        return 0;
    }
    let n = (pr_c / 100.0 * active as f64).floor() as usize;
    n.max(1).min(active - 1)
}

/// Decouple the active channels with the smallest `F_k`.
///
/// Ties are broken by ascending channel index. The returned mask records
/// this round in its history, even when nothing was selected.
pub fn select_decouple(table: &FairnessIndexTable, pr_c: f64, mask: &ChannelMask) -> Result<ChannelMask> {
    if !(0.0..=100.0).contains(&pr_c) {
        bail!(Config, "decoupling ratio must be a percentage in [0, 100], got {pr_c}");
    }
    if table.channels() != mask.channels() {
        bail!(
            Dimension,
            "table covers {} channels, mask {}",
            table.channels(),
            mask.channels()
        );
    }
    let active = mask.active_count();
    if active == 0 {
        bail!(State, "every channel is already decoupled");
    }
    let mut candidates: Vec<(usize, f64)> = (0..mask.channels())
        .filter(|&k| mask.is_active(k))
        .filter_map(|k| table.index[k].map(|f| (k, f)))
        .collect();
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let take = decouple_count(pr_c, active).min(candidates.len());
    let mut chosen: Vec<usize> = candidates[..take].iter().map(|&(k, _)| k).collect();
    chosen.sort_unstable();
    let mut next = mask.clone();
    next.decouple(&chosen)?;
    Ok(next)
}
