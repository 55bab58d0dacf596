//! Entropic optimal transport by Sinkhorn-Knopp scaling.
//!
//! With cost `c_ij = (x_i - y_j)²` and Gibbs kernel `K = exp(-c/ε)`, the
//! scalings alternate `u ← a / (K v)` and `v ← b / (Kᵀ u)`; the plan is
//! `π = diag(u) K diag(v)` and the reported cost is `Σ_ij π_ij c_ij`. The
//! entropic term only shapes the plan and is not added to the cost.
//!
//! When a row or column of `K` underflows to zero the solver switches to
//! log-domain potentials `f = ε log u`, `g = ε log v`.
//!
//! At small `ε` the scalings can contract too slowly to reach the
//! tolerance. A plan that stops short is rounded onto the exact marginals
//! (rows, then columns, scaled down where they carry excess mass, plus a
//! rank-one fill of the remainder) and still reports `converged = false`.

use super::distribution::Distribution;
use crate::error::{bail, Result};
use crate::graph::kernels::plan_cost;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    /// Stop once the largest row-marginal error falls below this.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 5e-4,
            max_iter: 500,
            tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornResult {
    pub cost: f64,
    /// Row-major `n x m` transport plan.
    pub plan: Vec<f64>,
    pub n: usize,
    pub m: usize,
    /// Whether the scalings met the tolerance before any rounding.
    pub converged: bool,
    pub iterations: usize,
    /// Largest marginal error of the returned plan.
    pub residual: f64,
    pub log_domain: bool,
}

impl SinkhornResult {
    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks(self.m).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut cols = vec![0.0; self.m];
        for row in self.plan.chunks(self.m) {
            for (c, v) in cols.iter_mut().zip(row) {
                *c += v;
            }
        }
        cols
    }
}

fn marginal_residual(plan: &[f64], m: usize, a: &[f64], b: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    let mut cols = vec![0.0; m];
    for (row, ai) in plan.chunks(m).zip(a) {
        worst = worst.max((row.iter().sum::<f64>() - ai).abs());
        for (c, v) in cols.iter_mut().zip(row) {
            *c += v;
        }
    }
    for (c, bj) in cols.iter().zip(b) {
        worst = worst.max((c - bj).abs());
    }
    worst
}

/// Entropic transport cost from `src` to `dst` under squared distance.
pub fn sinkhorn_cost(src: &Distribution, dst: &Distribution, cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    src.validate()?;
    dst.validate()?;
    if !(cfg.epsilon > 0.0) || !cfg.epsilon.is_finite() {
        bail!(Domain, "entropic regularisation must be positive, got {}", cfg.epsilon);
    }
    if cfg.max_iter == 0 {
        bail!(Config, "max_iter must be positive");
    }
    let (n, m) = (src.len(), dst.len());
    let cost: Vec<f64> = src
        .support
        .iter()
        .flat_map(|x| dst.support.iter().map(move |y| (x - y) * (x - y)))
        .collect();
    let kernel: Vec<f64> = cost.iter().map(|c| (-c / cfg.epsilon).exp()).collect();
    let row_dead = kernel.chunks(m).any(|r| r.iter().all(|&k| k == 0.0));
    let col_dead = (0..m).any(|j| (0..n).all(|i| kernel[i * m + j] == 0.0));
    let solved = if row_dead || col_dead {
        None
    } else {
        scaling_iterations(&kernel, n, m, src, dst, cfg)
    };
    let (plan, converged, iterations, residual, log_domain) = match solved {
        Some((plan, converged, it, res)) => (plan, converged, it, res, false),
        None => {
            let (plan, converged, it, res) = log_iterations(&cost, n, m, src, dst, cfg);
            (plan, converged, it, res, true)
        }
    };
    let (plan, residual) = if converged {
        (plan, residual)
    } else {
        let p = round_to_marginals(plan, m, &src.weights, &dst.weights);
        let r = marginal_residual(&p, m, &src.weights, &dst.weights);
        (p, r)
    };
    let total = plan_cost(&plan, &src.support, &dst.support);
    if !total.is_finite() {
        bail!(Numeric, "transport cost is not finite");
    }
    Ok(SinkhornResult {
        cost: total,
        plan,
        n,
        m,
        converged,
        iterations,
        residual,
        log_domain,
    })
}

/// Project a nearly feasible plan onto the exact marginals: scale down rows
/// and then columns that carry too much mass, and hand the missing mass out
/// as a rank-one correction.
fn round_to_marginals(mut plan: Vec<f64>, m: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    for (row, &ai) in plan.chunks_mut(m).zip(a) {
        let s: f64 = row.iter().sum();
        if s > ai {
            let f = ai / s;
            row.iter_mut().for_each(|v| *v *= f);
        }
    }
    let mut cols = vec![0.0; m];
    for row in plan.chunks(m) {
        for (c, v) in cols.iter_mut().zip(row) {
            *c += v;
        }
    }
    for row in plan.chunks_mut(m) {
        for ((v, &c), &bj) in row.iter_mut().zip(&cols).zip(b) {
            if c > bj {
                *v *= bj / c;
            }
        }
    }
    let row_gap: Vec<f64> = plan.chunks(m).zip(a).map(|(r, ai)| ai - r.iter().sum::<f64>()).collect();
    let mut col_gap = b.to_vec();
    for row in plan.chunks(m) {
        for (g, v) in col_gap.iter_mut().zip(row) {
            *g -= v;
        }
    }
    let total: f64 = row_gap.iter().sum();
    if total > 0.0 {
        for (row, rg) in plan.chunks_mut(m).zip(&row_gap) {
            for (v, cg) in row.iter_mut().zip(&col_gap) {
                *v += rg * cg / total;
            }
        }
    }
    plan
}

type Solved = (Vec<f64>, bool, usize, f64);

/// Primal scaling. Returns `None` if an update divides by zero.
fn scaling_iterations(
    kernel: &[f64],
    n: usize,
    m: usize,
    src: &Distribution,
    dst: &Distribution,
    cfg: &SinkhornConfig,
) -> Option<Solved> {
    let a = &src.weights;
    let b = &dst.weights;
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let build = |u: &[f64], v: &[f64]| -> Vec<f64> {
        let mut plan = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                plan[i * m + j] = u[i] * kernel[i * m + j] * v[j];
            }
        }
        plan
    };
    let mut best: Option<Solved> = None;
    for it in 1..=cfg.max_iter {
        for i in 0..n {
            let kv: f64 = (0..m).map(|j| kernel[i * m + j] * v[j]).sum();
            if kv == 0.0 || !kv.is_finite() {
                return None;
            }
            u[i] = a[i] / kv;
        }
        for j in 0..m {
            let ku: f64 = (0..n).map(|i| kernel[i * m + j] * u[i]).sum();
            if ku == 0.0 || !ku.is_finite() {
                return None;
            }
            v[j] = b[j] / ku;
        }
        let plan = build(&u, &v);
        let res = marginal_residual(&plan, m, a, b);
        if !res.is_finite() {
            return None;
        }
        let improved = best.as_ref().is_none_or(|b| res < b.3);
        if res < cfg.tol {
            return Some((plan, true, it, res));
        }
        if improved {
            best = Some((plan, false, it, res));
        }
    }
    best
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + values.map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn log_iterations(cost: &[f64], n: usize, m: usize, src: &Distribution, dst: &Distribution, cfg: &SinkhornConfig) -> Solved {
    let eps = cfg.epsilon;
    let log_a: Vec<f64> = src.weights.iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = dst.weights.iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let build = |f: &[f64], g: &[f64]| -> Vec<f64> {
        let mut plan = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                plan[i * m + j] = ((f[i] + g[j] - cost[i * m + j]) / eps).exp();
            }
        }
        plan
    };
    let mut best: Option<Solved> = None;
    for it in 1..=cfg.max_iter {
        for i in 0..n {
            let lse = log_sum_exp((0..m).map(|j| (g[j] - cost[i * m + j]) / eps));
            f[i] = if log_a[i] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                eps * (log_a[i] - lse)
            };
        }
        for j in 0..m {
            let lse = log_sum_exp((0..n).map(|i| (f[i] - cost[i * m + j]) / eps));
            g[j] = if log_b[j] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                eps * (log_b[j] - lse)
            };
        }
        let plan = build(&f, &g);
        let res = marginal_residual(&plan, m, &src.weights, &dst.weights);
        if res < cfg.tol {
            return (plan, true, it, res);
        }
        if best.as_ref().is_none_or(|b| res < b.3) {
            best = Some((plan, false, it, res));
        }
    }
    best.expect("at least one iteration")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(eps: f64) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: eps,
            max_iter: 5000,
            tol: 1e-9,
        }
    }

    #[test]
    fn same_point_mass_costs_nothing() {
        let p = Distribution::point_mass(0.4).unwrap();
        let r = sinkhorn_cost(&p, &p, &cfg(1e-3)).unwrap();
        assert_eq!(r.cost, 0.0);
        assert!(r.converged);
    }

    #[test]
    fn separated_point_masses() {
        let a = Distribution::point_mass(0.0).unwrap();
        let b = Distribution::point_mass(0.7).unwrap();
        let r = sinkhorn_cost(&a, &b, &cfg(5e-4)).unwrap();
        assert!((r.cost - 0.49).abs() < 1e-12);
        assert!(r.log_domain);
    }

    #[test]
    fn sorted_matching_for_two_points() {
        let a = Distribution::uniform(vec![0.1, 0.6]).unwrap();
        let b = Distribution::uniform(vec![0.2, 0.9]).unwrap();
        let r = sinkhorn_cost(&a, &b, &cfg(1e-3)).unwrap();
        let exact = 0.5 * (0.01 + 0.09);
        assert!((r.cost - exact).abs() / exact < 0.01, "{} vs {exact}", r.cost);
        for (s, w) in r.row_sums().iter().zip(&a.weights) {
            assert!((s - w).abs() < 1e-9);
        }
        for (s, w) in r.col_sums().iter().zip(&b.weights) {
            assert!((s - w).abs() < 1e-9);
        }
    }

    #[test]
    fn large_epsilon_uses_primal_iterations() {
        let a = Distribution::uniform(vec![0.1, 0.6, 0.3]).unwrap();
        let b = Distribution::uniform(vec![0.2, 0.9]).unwrap();
        let r = sinkhorn_cost(&a, &b, &cfg(0.5)).unwrap();
        assert!(!r.log_domain && r.converged);
        assert!(r.plan.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let a = Distribution::uniform(vec![0.1, 0.11, 0.5]).unwrap();
        let b = Distribution::uniform(vec![0.105, 0.3, 0.52]).unwrap();
        let r = sinkhorn_cost(
            &a,
            &b,
            &SinkhornConfig {
                epsilon: 1e-4,
                max_iter: 1,
                tol: 1e-15,
            },
        )
        .unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn rejects_bad_epsilon() {
        let p = Distribution::point_mass(0.4).unwrap();
        assert!(sinkhorn_cost(&p, &p, &cfg(0.0)).is_err());
    }

    #[test]
    fn stalled_plans_are_rounded_onto_the_marginals() {
        let a = Distribution::uniform(vec![0.65, 0.4]).unwrap();
        let b = Distribution::uniform(vec![0.25, 0.55]).unwrap();
        let r = sinkhorn_cost(
            &a,
            &b,
            &SinkhornConfig {
                epsilon: 1e-3,
                max_iter: 200,
                tol: 1e-12,
            },
        )
        .unwrap();
        assert!(!r.converged);
        assert!(r.residual < 1e-15);
        assert!(r.plan.iter().all(|&p| p >= 0.0));
        assert!((r.cost - 0.5 * (0.01 + 0.0225)).abs() < 1e-3);
    }
}
