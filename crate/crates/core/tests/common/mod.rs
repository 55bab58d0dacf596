#![allow(dead_code)]

use fairdetect::graph::{Graph, Var};
use fairdetect::Tensor;

/// Largest relative gap between reverse-mode and central-difference
/// gradients of the scalar built by `f`, over every parameter element.
///
/// The denominator is floored at `floor` so that gradients that are zero
/// up to rounding do not dominate.
pub fn max_rel_fd_error<F>(params: &[Tensor], h: f64, floor: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars);
    let grads = g.backward(root).unwrap();
    let eval = |ps: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let r = f(&mut g, &vs);
        g.value(r).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi]);
        for k in 0..p.len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[k] += h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[k];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(floor));
        }
    }
    worst
}

/// Exact squared-distance OT cost between two uniform measures of equal
/// size, by enumerating every permutation.
pub fn exact_ot_cost(xs: &[f64], ys: &[f64]) -> f64 {
    fn permute(k: usize, perm: &mut Vec<usize>, xs: &[f64], ys: &[f64], best: &mut f64) {
        if k == perm.len() {
            let c: f64 = perm.iter().enumerate().map(|(i, &j)| (xs[i] - ys[j]).powi(2)).sum();
            *best = best.min(c / xs.len() as f64);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute(k + 1, perm, xs, ys, best);
            perm.swap(k, i);
        }
    }
    let mut perm: Vec<usize> = (0..ys.len()).collect();
    let mut best = f64::INFINITY;
    permute(0, &mut perm, xs, ys, &mut best);
    best
}

/// Direct evaluation of the soft-nearest-neighbour channel loss: for each
/// sample, the clamped share of its neighbour weight that falls on its own
/// group, averaged as a negative log.
pub fn snnl_direct(rows: &[Vec<f64>], groups: &[u32], temperature: f64, clamp: f64) -> f64 {
    let b = rows.len();
    let dist = |i: usize, j: usize| -> f64 { rows[i].iter().zip(&rows[j]).map(|(a, c)| (a - c) * (a - c)).sum() };
    let mut total = 0.0;
    for i in 0..b {
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..b {
            if j == i {
                continue;
            }
            let w = (-dist(i, j) / temperature).exp();
            den += w;
            if groups[j] == groups[i] {
                num += w;
            }
        }
        let ratio = (num / den).clamp(clamp, 1.0);
        total += -ratio.ln();
    }
    total / b as f64
}

/// Mann-Whitney AUC by explicit pair enumeration, ties counting one half.
pub fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}
