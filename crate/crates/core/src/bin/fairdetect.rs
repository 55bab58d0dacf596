//! Command-line front end.
//!
//! Any configuration key can be given as `--key=value` on any subcommand;
//! those flags override the `--config` file. `--seed` is required for
//! `train` and `sweep`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fairdetect::detector::Detector;
use fairdetect::harness::{
    evaluate, make_splits, robustness_eval, sweep, train, write_run_dir, write_sweep_csv, RunConfig, SweepGrid,
};
use fairdetect::metrics::MetricsReport;
use fairdetect::synth::{generate, split, Dataset, PerturbKind};
use fairdetect::{Error, Result};

#[derive(Parser)]
#[command(name = "fairdetect", version, about = "Fair forgery detection on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridKind {
    Decoupling,
    Lambda,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory (dataset.bin, manifest.csv, config.txt).
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on the train split, evaluate on the test split, write a run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a run's checkpoint and print the metrics JSON.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid of training runs; writes sweep.csv.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum)]
        grid: GridKind,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        pr_c: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        iterations: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.001,0.005,0.01,0.05")]
        lambdas: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Metrics under distortions, with deltas against the clean split.
    Robustness {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "GN,GB,BWN")]
        kinds: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2")]
        intensities: Vec<f64>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[arg(long, default_value_t = 0)]
        perturb_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a metrics JSON or any CSV output as an aligned table.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

/// Pull `--key=value` configuration overrides out of the argument list.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some((k, v)) = a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            if k != "seed" && RunConfig::is_key(k) {
                overrides.push((k.to_string(), v.to_string()));
                continue;
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn load_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::from_text(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    cfg.apply(overrides)?;
    Ok(cfg)
}

fn dataset_path(dir: &Path) -> PathBuf {
    if dir.is_dir() {
        dir.join("dataset.bin")
    } else {
        dir.to_path_buf()
    }
}

fn pick_split(data: &Dataset, ratios: [f64; 3], which: SplitName) -> Result<Dataset> {
    let s = make_splits(data, ratios)?;
    Ok(match which {
        SplitName::Train => s.train,
        SplitName::Val => s.val,
        SplitName::Test => s.test,
        SplitName::All => data.clone(),
    })
}

fn run_config_of(run: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
    load_config(Some(&run.join("config.txt")), overrides)
}

fn write_or_print(out: Option<&Path>, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    match out {
        Some(p) => std::fs::write(p, buf)?,
        None => print!("{}", String::from_utf8_lossy(&buf)),
    }
    Ok(())
}

fn render_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().enumerate().map(|(c, v)| format!("{v:<w$}", w = widths[c])).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn report(input: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = if input.extension().is_some_and(|e| e == "json") {
        let rep: MetricsReport = serde_json::from_reader(std::fs::File::open(input)?)?;
        let mut rows = vec![vec!["axis".to_string(), "metric".to_string(), "value".to_string()]];
        rows.extend(rep.csv_rows().into_iter().map(|(a, m, v)| vec![a, m, format!("{v:.4}")]));
        rows
    } else {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(input)?;
        rdr.records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?
    };
    print!("{}", render_table(&rows));
    Ok(())
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    match cli.command {
        Command::Gen { out, config } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            cfg.validate()?;
            let data = generate(&cfg.data)?;
            let splits = split(&data, cfg.split, cfg.data.seed)?;
            std::fs::create_dir_all(&out)?;
            data.save(&out.join("dataset.bin"))?;
            data.write_manifest(Some(&splits), std::fs::File::create(out.join("manifest.csv"))?)?;
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            eprintln!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Train { data, out, seed, config } => {
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            cfg.train.seed = seed;
            let dataset = Dataset::load(&dataset_path(&data))?;
            cfg.data = dataset.config.clone();
            cfg.validate()?;
            let splits = make_splits(&dataset, cfg.split)?;
            let model = train(&cfg.train, &splits.train)?;
            let metrics = evaluate(&model.detector, &model.mask, &splits.test, cfg.train.threshold)?;
            write_run_dir(&out, &cfg, &model, &metrics)?;
            eprintln!(
                "test AUC {:.4}; decoupled {:?}; run written to {}",
                metrics.auc,
                model.mask.decoupled(),
                out.display()
            );
        }
        Command::Eval { run, data, split, out } => {
            let cfg = run_config_of(&run, &overrides)?;
            let (detector, mask) = Detector::load(&run.join("model.ckpt"))?;
            let dataset = Dataset::load(&dataset_path(&data))?;
            let part = pick_split(&dataset, cfg.split, split)?;
            let metrics = evaluate(&detector, &mask, &part, cfg.train.threshold)?;
            write_or_print(out.as_deref(), |buf| metrics.write_json(buf))?;
        }
        Command::Sweep {
            data,
            out,
            seed,
            grid,
            pr_c,
            iterations,
            lambdas,
            config,
        } => {
            let mut cfg = load_config(config.as_deref(), &overrides)?;
            cfg.train.seed = seed;
            let dataset = Dataset::load(&dataset_path(&data))?;
            cfg.data = dataset.config.clone();
            cfg.validate()?;
            let splits = make_splits(&dataset, cfg.split)?;
            let grid = match grid {
                GridKind::Decoupling => SweepGrid::Decoupling { pr_c, iterations },
                GridKind::Lambda => SweepGrid::Lambda(lambdas),
            };
            let rows = sweep(&cfg.train, &grid, &splits.train, &splits.test)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.txt"), cfg.to_text())?;
            write_sweep_csv(&rows, std::fs::File::create(out.join("sweep.csv"))?)?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            for r in rows.iter().filter(|r| r.outcome.is_err()) {
                if let Err(msg) = &r.outcome {
                    eprintln!("cell pr_c={} iterations={} lambda={} failed: {msg}", r.pr_c, r.iterations, r.lambda);
                }
            }
            eprintln!("{} cells, {failed} failed", rows.len());
        }
        Command::Robustness {
            run,
            data,
            kinds,
            intensities,
            split,
            perturb_seed,
            out,
        } => {
            let cfg = run_config_of(&run, &overrides)?;
            let kinds: Vec<PerturbKind> = kinds.iter().map(|k| k.parse()).collect::<Result<_>>()?;
            let (detector, mask) = Detector::load(&run.join("model.ckpt"))?;
            let dataset = Dataset::load(&dataset_path(&data))?;
            let part = pick_split(&dataset, cfg.split, split)?;
            let rep = robustness_eval(
                &detector,
                &mask,
                &part,
                &kinds,
                &intensities,
                cfg.train.threshold,
                perturb_seed,
            )?;
            write_or_print(out.as_deref(), |buf| rep.write_csv(buf))?;
        }
        Command::Report { input } => report(&input)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(1)
}
