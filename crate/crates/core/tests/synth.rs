mod common;

use common::auc_pairs;
use fairdetect::harness::{evaluate, make_splits, train, TrainConfig};
use fairdetect::metrics::Axis;
use fairdetect::synth::{generate, Dataset, GenConfig};

fn bytes(d: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    d.write_to(&mut buf).unwrap();
    buf
}

#[test]
fn generator_output_is_byte_deterministic() {
    let cfg = GenConfig {
        count: 200,
        seed: 9,
        ..Default::default()
    };
    assert_eq!(bytes(&generate(&cfg).unwrap()), bytes(&generate(&cfg).unwrap()));
    let other = GenConfig { seed: 10, ..cfg };
    assert_ne!(bytes(&generate(&cfg).unwrap()), bytes(&generate(&other).unwrap()));
}

/// Logistic regression on raw pixels, full-batch gradient descent.
fn fit_logistic(x: &[Vec<f64>], y: &[u8], steps: usize, lr: f64) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let n = x.len() as f64;
    for _ in 0..steps {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let z: f64 = xi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - f64::from(yi);
            for (g, a) in gw.iter_mut().zip(xi) {
                *g += err * a;
            }
            gb += err;
        }
        for (wk, g) in w.iter_mut().zip(&gw) {
            *wk -= lr * g / n;
        }
        b -= lr * gb / n;
    }
    (w, b)
}

#[test]
fn authenticity_is_linearly_learnable_without_leakage() {
    let cfg = GenConfig {
        count: 1200,
        leakage: 0.0,
        seed: 3,
        ..Default::default()
    };
    let data = generate(&cfg).unwrap();
    let rows: Vec<Vec<f64>> = data.samples.iter().map(|s| s.image.iter().map(|p| p - 0.5).collect()).collect();
    let labels: Vec<u8> = data.samples.iter().map(|s| s.label).collect();
    let (train_x, test_x) = rows.split_at(800);
    let (train_y, test_y) = labels.split_at(800);
    let (w, b) = fit_logistic(train_x, train_y, 300, 1.0);
    let scores: Vec<f64> = test_x
        .iter()
        .map(|x| x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b)
        .collect();
    let auc = auc_pairs(&scores, test_y);
    assert!(auc >= 0.9, "probe AUC {auc}");
}

#[test]
fn leakage_induces_false_positive_spread_in_the_baseline() {
    for seed in 0..5 {
        let data = generate(&GenConfig {
            seed,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(data.config.leakage, 0.8);
        let splits = make_splits(&data, [0.6, 0.2, 0.2]).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            learning_rate: 0.1,
            lambda: 0.0,
            pr_c: 0.0,
            seed,
            ..Default::default()
        };
        let model = train(&cfg, &splits.train).unwrap();
        let rep = evaluate(&model.detector, &model.mask, &splits.test, cfg.threshold).unwrap();
        let spread = rep.axis(Axis::Intersection).unwrap().f_fpr;
        assert!(spread > 0.0, "seed {seed}: intersection F_FPR {spread}");
    }
}
