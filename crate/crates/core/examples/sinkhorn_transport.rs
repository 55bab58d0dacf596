//! Entropic transport between two 1-D distributions at several ε, next to
//! the exact cost of matching sorted points.

use fairdetect::gda::{sinkhorn_cost, Distribution, SinkhornConfig};
use fairdetect::Result;

fn main() -> Result<()> {
    let xs = vec![0.1, 0.35, 0.4, 0.8];
    let ys = vec![0.2, 0.5, 0.9, 0.95];
    let mut a = xs.clone();
    let mut b = ys.clone();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let exact: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    println!("exact cost {exact:.6}");

    let src = Distribution::uniform(xs)?;
    let dst = Distribution::uniform(ys)?;
    for epsilon in [1e-1, 1e-2, 1e-3] {
        let cfg = SinkhornConfig {
            epsilon,
            ..Default::default()
        };
        let r = sinkhorn_cost(&src, &dst, &cfg)?;
        println!(
            "eps {epsilon:<6} cost {:.6} iterations {:>4} residual {:.1e} converged {}",
            r.cost, r.iterations, r.residual, r.converged
        );
    }
    Ok(())
}
