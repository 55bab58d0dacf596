//! Smooth a handful of predicted probabilities into a gridded density and
//! print it as a text histogram.

use fairdetect::gda::kde::silverman_bandwidth;
use fairdetect::gda::kde_density;
use fairdetect::Result;

fn main() -> Result<()> {
    let probs = [0.05, 0.1, 0.12, 0.2, 0.22, 0.7, 0.75, 0.8, 0.95];
    let bw = silverman_bandwidth(&probs);
    let d = kde_density(&probs, 21, bw)?;
    println!("bandwidth {bw:.4}");
    for (x, w) in d.support.iter().zip(&d.weights) {
        println!("{x:.2} {:<40} {w:.4}", "#".repeat((w * 200.0).round() as usize));
    }
    Ok(())
}
