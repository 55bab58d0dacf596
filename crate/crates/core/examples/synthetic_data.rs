//! Generate the biased benchmark, report its composition and apply each
//! distortion to one image.

use fairdetect::synth::{generate, group_name, perturb, split, GenConfig, PerturbKind};
use fairdetect::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let cfg = GenConfig {
        count: 1000,
        ..Default::default()
    };
    let data = generate(&cfg)?;
    let (real, fake) = data.class_counts();
    println!("{} images of {}x{}: {real} real, {fake} fake", data.len(), data.height, data.width);
    for (g, n) in data.group_counts().iter().enumerate() {
        let fakes = data.samples.iter().filter(|s| s.group() == g as u32 && s.label == 1).count();
        println!("  {:<16} {n:>4} samples, {:.0}% fake", group_name(g as u32), 100.0 * fakes as f64 / *n as f64);
    }
    let parts = split(&data, [0.6, 0.2, 0.2], cfg.seed)?;
    println!("split {}/{}/{}", parts.train.len(), parts.val.len(), parts.test.len());

    let image = &data.samples[0].image;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kind in [PerturbKind::GaussianNoise, PerturbKind::GaussianBlur, PerturbKind::BlockNoise] {
        let out = perturb(image, data.height, data.width, kind, 1.0, &mut rng)?;
        let moved = out.iter().zip(image).map(|(a, b)| (a - b).abs()).sum::<f64>() / out.len() as f64;
        println!("{:<4} mean absolute change {moved:.4}", kind.code());
    }
    Ok(())
}
