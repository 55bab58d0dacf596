//! The outer decoupling loop with the combined-loss inner SGD loop.
//!
//! Randomness comes from independent ChaCha streams of the training seed:
//! stream [`STREAM_SHUFFLE`] orders the mini-batches, [`STREAM_SCORING`]
//! draws the channel-scoring batches and [`STREAM_FAIRNESS`] samples the
//! aligned group. Weights are initialised from `Detector::new(_, seed)`.
//! Turning a mechanism off therefore leaves the other draws unchanged.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::detector::{ChannelMask, Detector, DetectorConfig};
use crate::error::{bail, Result};
use crate::gda::{fairness_loss, group_predictions, total_loss, TraceRow};
use crate::graph::Graph;
use crate::sfd::{estimate_fairness_index, select_decouple};
use crate::synth::{Dataset, GROUPS};

pub const STREAM_SHUFFLE: u64 = 1;
pub const STREAM_SCORING: u64 = 2;
pub const STREAM_FAIRNESS: u64 = 3;

/// Stream `id` of the ChaCha generator seeded with `seed`.
pub fn rng_stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Mini-batch order of one epoch: a fresh shuffle of `0..n` cut into
/// consecutive chunks, the last one possibly short.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub step: usize,
    pub cls: f64,
    pub fair: f64,
    /// Weight applied to `fair` at this step; 0 while the fairness loss is off.
    pub lambda: f64,
    pub total: f64,
    /// No group was eligible for alignment in this batch.
    pub fair_skipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Channel scores before selection; `None` when no scoring ran.
    pub fairness_index: Option<Vec<Option<f64>>>,
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub iterations: Vec<IterationRecord>,
    pub trace: Vec<TraceRow>,
    pub final_mask: ChannelMask,
    pub warnings: Vec<String>,
    pub wall_clock_secs: f64,
}

impl TrainHistory {
    /// Union of the per-iteration selections, sorted.
    pub fn decoupled(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.iterations.iter().flat_map(|r| r.selected.iter().copied()).collect();
        all.sort_unstable();
        all
    }

    /// CSV `iteration,epoch,step,cls,fair,lambda,total,fair_skipped`.
    pub fn write_steps_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "epoch", "step", "cls", "fair", "lambda", "total", "fair_skipped"])?;
        for s in &self.steps {
            out.write_record([
                s.iteration.to_string(),
                s.epoch.to_string(),
                s.step.to_string(),
                format!("{:.17e}", s.cls),
                format!("{:.17e}", s.fair),
                format!("{}", s.lambda),
                format!("{:.17e}", s.total),
                u8::from(s.fair_skipped).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// CSV `iteration,channel_index,F_k,selected`.
    pub fn write_iterations_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "channel_index", "F_k", "selected"])?;
        for r in &self.iterations {
            let Some(index) = &r.fairness_index else {
                continue;
            };
            for (k, f) in index.iter().enumerate() {
                out.write_record([
                    r.iteration.to_string(),
                    k.to_string(),
                    f.map(|v| format!("{v:.17e}")).unwrap_or_default(),
                    u8::from(r.selected.contains(&k)).to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub detector: Detector,
    pub mask: ChannelMask,
    pub history: TrainHistory,
}

pub fn detector_config(data: &Dataset) -> DetectorConfig {
    DetectorConfig {
        height: data.height,
        width: data.width,
        ..DetectorConfig::default()
    }
}

fn check_dataset(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        bail!(Data, "training split is empty");
    }
    let (real, fake) = data.class_counts();
    if real == 0 || fake == 0 {
        bail!(Data, "training split has a single class ({real} real, {fake} fake)");
    }
    if cfg.lambda > 0.0 {
        let counts = data.group_counts();
        if let Some(g) = (0..GROUPS).find(|&g| counts[g] == 0) {
            bail!(
                Data,
                "fairness loss needs every intersection group in the training split; {} is missing",
                crate::synth::group_name(g as u32)
            );
        }
    }
    Ok(())
}

/// Scoring batches for one iteration, drawn from the scoring stream.
fn scoring_batches(data: &Dataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(crate::Tensor, Vec<u32>)>> {
    let mut out = Vec::with_capacity(cfg.scoring_batches);
    let mut pool: Vec<Vec<usize>> = Vec::new();
    while out.len() < cfg.scoring_batches {
        if pool.is_empty() {
            pool = epoch_batches(data.len(), cfg.batch_size, rng);
            pool.reverse();
        }
        let idx = pool.pop().expect("refilled above");
        out.push((data.images(&idx)?, data.groups(&idx)));
    }
    Ok(out)
}

/// Run the full procedure on `data` (the training split).
///
/// Per outer iteration: score the active channels, decouple the lowest
/// `pr_c` percent, then train for that iteration's share of the epochs on
/// `cls + λ·fair` with plain SGD. With `pr_c = 0` scoring is skipped and an
/// empty selection round is recorded.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainedModel> {
    cfg.validate()?;
    check_dataset(cfg, data)?;
    let started = Instant::now();
    let mut detector = Detector::new(detector_config(data), cfg.seed)?;
    let mut mask = ChannelMask::all_active(detector.config().feature_channels());
    let mut shuffle_rng = rng_stream(cfg.seed, STREAM_SHUFFLE);
    let mut scoring_rng = rng_stream(cfg.seed, STREAM_SCORING);
    let mut fair_rng = rng_stream(cfg.seed, STREAM_FAIRNESS);
    let sinkhorn = cfg.sinkhorn();
    let snnl = cfg.snnl();

    let mut steps = Vec::new();
    let mut iterations = Vec::new();
    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    let mut unconverged = 0usize;
    let mut skipped = 0usize;
    let mut step = 0usize;
    let mut epoch = 0usize;

    for (iteration, &n_epochs) in cfg.epochs_per_iteration().iter().enumerate() {
        let record = if cfg.pr_c > 0.0 {
            let batches = scoring_batches(data, cfg, &mut scoring_rng)?;
            let table = estimate_fairness_index(&detector, &mask, batches, &snnl)?;
            mask = select_decouple(&table, cfg.pr_c, &mask)?;
            IterationRecord {
                iteration,
                fairness_index: Some(table.index),
                selected: mask.history().last().cloned().unwrap_or_default(),
            }
        } else {
            mask.decouple(&[])?;
            IterationRecord {
                iteration,
                fairness_index: None,
                selected: Vec::new(),
            }
        };
        iterations.push(record);

        let fair_on = cfg.lambda > 0.0 && (!cfg.defer_gda || iteration + 1 == cfg.max_iterations);
        let lambda = if fair_on { cfg.lambda } else { 0.0 };
        for _ in 0..n_epochs {
            for idx in epoch_batches(data.len(), cfg.batch_size, &mut shuffle_rng) {
                let labels = data.labels(&idx);
                let groups = data.groups(&idx);
                let mut g = Graph::new();
                let vars = detector.build(&mut g, data.images(&idx)?, &mask)?;
                let cls_var = g.cross_entropy(vars.logits, &labels)?;
                let probs = g.value(vars.fake_prob).data().to_vec();
                let grouped = group_predictions(&probs, &labels, &groups, cfg.min_cell)?;
                let plan = fairness_loss(&grouped, &sinkhorn, cfg.mode, &mut fair_rng)?;
                let mut root = cls_var;
                if fair_on {
                    if let Some(fv) = plan.record(&mut g, vars.fake_prob)? {
                        let weighted = g.scale(fv, lambda)?;
                        root = g.add(cls_var, weighted)?;
                    }
                }
                let bundle = total_loss(g.value(cls_var).item()?, plan.value(), lambda)?;
                let mut grads = g.backward(root)?;
                let grads: Vec<_> = vars.params.iter().map(|&p| grads.take(p)).collect();
                detector.sgd_step(&grads, cfg.learning_rate)?;

                unconverged += plan.terms.iter().filter(|t| !t.converged()).count();
                skipped += usize::from(plan.skipped);
                trace.extend(TraceRow::from_plan(step, &plan));
                steps.push(StepRecord {
                    iteration,
                    epoch,
                    step,
                    cls: bundle.cls,
                    fair: bundle.fair,
                    lambda,
                    total: bundle.total,
                    fair_skipped: plan.skipped,
                });
                step += 1;
            }
            epoch += 1;
        }
    }
    if unconverged > 0 {
        warnings.push(format!(
            "{unconverged} transport solves hit the iteration cap; best iterate used"
        ));
    }
    if skipped > 0 {
        warnings.push(format!("{skipped} batches had no group eligible for alignment"));
    }
    let history = TrainHistory {
        steps,
        iterations,
        trace,
        final_mask: mask.clone(),
        warnings,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainedModel {
        detector,
        mask,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sgd_update;
    use crate::synth::{generate, GenConfig};
    use crate::Tensor;

    fn tiny_data(count: usize) -> Dataset {
        generate(&GenConfig {
            count,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            max_iterations: 2,
            batch_size: 32,
            scoring_batches: 2,
            pr_c: 10.0,
            ..Default::default()
        }
    }

    #[test]
    fn sgd_step_on_two_parameter_model() {
        // L = (2w + b)^2, so dL/dw = 4(2w + b) and dL/db = 2(2w + b).
        let (w0, b0, lr) = (0.3, -0.1, 1e-3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let w = g.param(Tensor::new(vec![1, 1], vec![w0]).unwrap());
        let b = g.param(Tensor::vector(vec![b0]).unwrap());
        let y = g.dense(x, w, b).unwrap();
        let sq = g.square(y).unwrap();
        let loss = g.sum(sq, &[0, 1]).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let mut params = vec![g.value(w).clone(), g.value(b).clone()];
        sgd_update(&mut params, &[grads.take(w), grads.take(b)], lr).unwrap();
        let r = 2.0 * w0 + b0;
        assert!((params[0].item().unwrap() - (w0 - lr * 4.0 * r)).abs() < 1e-12);
        assert!((params[1].item().unwrap() - (b0 - lr * 2.0 * r)).abs() < 1e-12);
    }

    #[test]
    fn logged_total_is_exact_sum() {
        let m = train(&quick(), &tiny_data(160)).unwrap();
        assert!(!m.history.steps.is_empty());
        for s in &m.history.steps {
            assert_eq!(s.total, s.cls + s.fair * s.lambda);
        }
    }

    #[test]
    fn decoupled_set_matches_history() {
        let m = train(&quick(), &tiny_data(160)).unwrap();
        assert_eq!(m.mask.decoupled(), m.history.decoupled());
        assert_eq!(m.history.iterations.len(), 2);
        // 10% of 16 active channels rounds down to one per round.
        assert_eq!(m.mask.decoupled().len(), 2);
    }

    #[test]
    fn same_seed_same_run() {
        let d = tiny_data(160);
        let a = train(&quick(), &d).unwrap();
        let b = train(&quick(), &d).unwrap();
        assert_eq!(a.detector.params(), b.detector.params());
        assert_eq!(a.history.steps, b.history.steps);
        assert_eq!(a.history.iterations, b.history.iterations);
    }

    #[test]
    fn single_class_is_rejected() {
        let d = tiny_data(160);
        let reals: Vec<usize> = (0..d.len()).filter(|&i| d.samples[i].label == 0).collect();
        let err = train(&quick(), &d.subset(&reals)).unwrap_err();
        assert!(matches!(err, crate::Error::Data(_)));
    }

    #[test]
    fn deferred_alignment_only_weights_last_iteration() {
        let cfg = TrainConfig {
            defer_gda: true,
            ..quick()
        };
        let m = train(&cfg, &tiny_data(160)).unwrap();
        for s in &m.history.steps {
            let expected = if s.iteration == 1 { cfg.lambda } else { 0.0 };
            assert_eq!(s.lambda, expected);
        }
    }

    #[test]
    fn epoch_batches_cover_every_index_once() {
        let mut rng = rng_stream(0, STREAM_SHUFFLE);
        let batches = epoch_batches(70, 32, &mut rng);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 32, 6]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..70).collect::<Vec<_>>());
    }
}
