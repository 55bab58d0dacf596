use super::distribution::Distribution;
use crate::error::{bail, Result};

/// Gaussian kernel density of `samples`, evaluated on `grid_size` evenly
/// spaced points spanning `[0, 1]` and renormalised to unit mass.
///
/// Normalisation is done in the log domain, so a very small bandwidth
/// concentrates the mass on the nearest grid points instead of underflowing.
pub fn kde_density(samples: &[f64], grid_size: usize, bandwidth: f64) -> Result<Distribution> {
    if samples.is_empty() {
        bail!(Domain, "density of an empty sample");
    }
    if grid_size < 2 {
        bail!(Domain, "grid needs at least two points, got {grid_size}");
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        bail!(Domain, "bandwidth must be positive, got {bandwidth}");
    }
    if samples.iter().any(|s| !s.is_finite()) {
        bail!(Numeric, "non-finite sample");
    }
    let grid: Vec<f64> = (0..grid_size)
        .map(|g| g as f64 / (grid_size - 1) as f64)
        .collect();
    let denom = 2.0 * bandwidth * bandwidth;
    let log_density: Vec<f64> = grid
        .iter()
        .map(|x| {
            let terms: Vec<f64> = samples.iter().map(|s| -(x - s) * (x - s) / denom).collect();
            let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
        })
        .collect();
    let mx = log_density.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = log_density.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = unnorm.iter().sum();
    let weights = unnorm.into_iter().map(|w| w / z).collect();
    Distribution::new(grid, weights)
}

/// Silverman's rule-of-thumb bandwidth, floored at `1e-3`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    if n < 2.0 {
        return 0.05;
    }
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    (1.06 * var.sqrt() * n.powf(-0.2)).max(1e-3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_about_centre() {
        let d = kde_density(&[0.5], 9, 0.1).unwrap();
        for g in 0..9 {
            assert!((d.weights[g] - d.weights[8 - g]).abs() < 1e-15);
        }
    }

    #[test]
    fn tiny_bandwidth_concentrates() {
        let d = kde_density(&[0.26], 5, 1e-4).unwrap();
        // Grid is 0, .25, .5, .75, 1; nearest point is 0.25.
        assert!((d.weights[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn direct_kernel_sum() {
        let samples = [0.1, 0.45, 0.8];
        let d = kde_density(&samples, 5, 0.2).unwrap();
        let raw: Vec<f64> = (0..5)
            .map(|g| {
                let x = g as f64 / 4.0;
                samples
                    .iter()
                    .map(|s| (-(x - s) * (x - s) / (2.0 * 0.04)).exp())
                    .sum()
            })
            .collect();
        let z: f64 = raw.iter().sum();
        for (w, r) in d.weights.iter().zip(&raw) {
            assert!((w - r / z).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_bandwidth() {
        assert!(kde_density(&[0.5], 4, 0.0).is_err());
        assert!(kde_density(&[0.5], 1, 0.1).is_err());
        assert!(kde_density(&[], 4, 0.1).is_err());
    }
}
