mod common;

use std::path::Path;
use std::process::Command;

use fairdetect::detector::{ChannelMask, Detector};
use fairdetect::harness::{
    evaluate, make_splits, perturb_dataset, predict, robustness_eval, sweep, train, SweepGrid, TrainConfig,
};
use fairdetect::harness::train::detector_config;
use fairdetect::metrics::{auc, Axis, MetricsReport};
use fairdetect::synth::{generate, GenConfig, PerturbKind};

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fairdetect")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn cli_runs_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let sweep_dir = dir.path().join("sweep");
    ok(&["gen", "--out", s(&data), "--count=400", "--data_seed=4"]);
    for f in ["dataset.bin", "manifest.csv", "config.txt"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--seed",
        "1",
        "--epochs=3",
        "--max_iterations=2",
        "--scoring_batches=3",
        "--learning_rate=0.3",
    ]);
    for f in [
        "config.txt",
        "model.ckpt",
        "history.csv",
        "iterations.csv",
        "fairness_trace.csv",
        "metrics.json",
        "warnings.log",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let config = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(config.contains("epochs=3") && config.contains("seed=1"));

    let json = ok(&["eval", "--run", s(&run), "--data", s(&data)]);
    let evaluated: MetricsReport = serde_json::from_str(&json).unwrap();
    let stored: MetricsReport =
        serde_json::from_reader(std::fs::File::open(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(evaluated, stored);

    let rob = dir.path().join("rob.csv");
    ok(&[
        "robustness",
        "--run",
        s(&run),
        "--data",
        s(&data),
        "--kinds",
        "GN,BWN",
        "--intensities",
        "0,0.1",
        "--out",
        s(&rob),
    ]);
    let rows = std::fs::read_to_string(&rob).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 2 * 3);

    ok(&[
        "sweep",
        "--data",
        s(&data),
        "--out",
        s(&sweep_dir),
        "--seed",
        "1",
        "--grid",
        "lambda",
        "--lambdas",
        "0.01,0",
        "--epochs=1",
        "--max_iterations=1",
        "--pr_c=0",
    ]);
    let table = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    let lambdas: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(lambdas, ["0", "0.01"]);

    let report = ok(&["report", "--input", s(&sweep_dir.join("sweep.csv"))]);
    assert!(report.starts_with("pr_c"));
    let report = ok(&["report", "--input", s(&run.join("metrics.json"))]);
    assert!(report.contains("intersection"));
}

#[test]
fn cli_exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "no_such_key=1\n").unwrap();
    let out = cli(&["gen", "--out", s(&dir.path().join("d")), "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));

    let out = cli(&["gen", "--out", s(&dir.path().join("d")), "--leakage=2"]);
    assert_eq!(out.status.code(), Some(2));

    let out = cli(&[
        "eval",
        "--run",
        s(&dir.path().join("missing")),
        "--data",
        s(&dir.path().join("missing")),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let out = cli(&["train", "--data", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2), "missing --seed is a usage error");
}

#[test]
fn detector_can_overfit_a_small_training_set() {
    let data = generate(&GenConfig {
        count: 128,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 16,
        learning_rate: 0.1,
        lambda: 0.0,
        pr_c: 0.0,
        ..Default::default()
    };
    let model = train(&cfg, &data).unwrap();
    let rep = evaluate(&model.detector, &model.mask, &data, 0.5).unwrap();
    assert!(rep.auc > 0.95, "training AUC {}", rep.auc);
}

#[test]
fn untrained_detectors_rank_at_chance_on_average() {
    let data = generate(&GenConfig {
        count: 400,
        ..Default::default()
    })
    .unwrap();
    let labels: Vec<u8> = data.samples.iter().map(|s| s.label).collect();
    let cfg = detector_config(&data);
    let mask = ChannelMask::all_active(cfg.feature_channels());
    let aucs: Vec<f64> = (0..12)
        .map(|seed| {
            let det = Detector::new(cfg.clone(), seed).unwrap();
            auc(&predict(&det, &mask, &data).unwrap(), &labels).unwrap()
        })
        .collect();
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.1, "mean AUC {mean} over {aucs:?}");
}

#[test]
fn one_cell_sweep_matches_a_standalone_run() {
    let data = generate(&GenConfig {
        count: 300,
        ..Default::default()
    })
    .unwrap();
    let splits = make_splits(&data, [0.6, 0.2, 0.2]).unwrap();
    let base = TrainConfig {
        epochs: 2,
        max_iterations: 1,
        scoring_batches: 3,
        learning_rate: 0.3,
        seed: 5,
        ..Default::default()
    };
    let rows = sweep(&base, &SweepGrid::Lambda(vec![0.01]), &splits.train, &splits.test).unwrap();
    let cfg = TrainConfig { lambda: 0.01, ..base };
    let model = train(&cfg, &splits.train).unwrap();
    let direct = evaluate(&model.detector, &model.mask, &splits.test, cfg.threshold).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].outcome.as_ref().unwrap(), &direct);
}

#[test]
fn robustness_deltas_recompose_from_independent_evaluations() {
    let data = generate(&GenConfig {
        count: 300,
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    let cfg = detector_config(&data);
    let det = Detector::new(cfg.clone(), 3).unwrap();
    let mask = ChannelMask::all_active(cfg.feature_channels());
    let intensities = [0.0, 0.05, 0.2];
    let rep = robustness_eval(&det, &mask, &data, &[PerturbKind::GaussianNoise], &intensities, 0.5, 11).unwrap();
    let clean = evaluate(&det, &mask, &data, 0.5).unwrap();
    assert_eq!(rep.clean, clean);
    for (row, &level) in rep.rows.iter().zip(&intensities) {
        let noisy = perturb_dataset(&data, PerturbKind::GaussianNoise, level, 11).unwrap();
        let again = evaluate(&det, &mask, &noisy, 0.5).unwrap();
        assert_eq!(row.report, again);
        for axis in Axis::ALL {
            let a = again.axis(axis).unwrap();
            let c = clean.axis(axis).unwrap();
            assert!((row.delta_f_fpr[&axis] - (a.f_fpr - c.f_fpr)).abs() < 1e-12);
            assert!((row.delta_es_auc[&axis] - (a.es_auc - c.es_auc)).abs() < 1e-12);
        }
    }
    assert!(rep.rows[0].delta_f_fpr.values().all(|&d| d == 0.0));
}
