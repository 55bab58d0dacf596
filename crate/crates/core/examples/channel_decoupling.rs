//! Score the detector's last-layer channels by how cleanly they separate
//! demographic groups, then decouple the most group-entangled ones.

use fairdetect::detector::{ChannelMask, Detector};
use fairdetect::harness::train::detector_config;
use fairdetect::harness::{train, TrainConfig};
use fairdetect::sfd::{estimate_fairness_index, select_decouple, SnnlParams};
use fairdetect::synth::{generate, GenConfig};
use fairdetect::Result;

fn main() -> Result<()> {
    let data = generate(&GenConfig {
        count: 800,
        ..Default::default()
    })?;
    let cfg = TrainConfig {
        epochs: 5,
        learning_rate: 0.1,
        lambda: 0.0,
        pr_c: 0.0,
        ..Default::default()
    };
    let model = train(&cfg, &data)?;
    let det: &Detector = &model.detector;
    let mask = ChannelMask::all_active(detector_config(&data).feature_channels());

    let batches = (0..8).map(|b| {
        let idx: Vec<usize> = (b * 64..(b + 1) * 64).collect();
        (data.images(&idx).expect("indices in range"), data.groups(&idx))
    });
    let table = estimate_fairness_index(det, &mask, batches, &SnnlParams::default())?;
    for (k, f) in table.index.iter().enumerate() {
        if let Some(f) = f {
            println!("channel {k:>2} F = {f:.4}");
        }
    }
    let decoupled = select_decouple(&table, 20.0, &mask)?;
    println!("decoupled {:?}", decoupled.decoupled());
    Ok(())
}
