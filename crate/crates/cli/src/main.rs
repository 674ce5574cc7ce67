use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use panoscan::config::{Ablation, RunConfig};
use panoscan::env::{load_envs, EnvBuilder};
use panoscan::features::{FeatureBank, FeatureEncoder};
use panoscan::heatmap::{render_heatmap, DEFAULT_ALPHA};
use panoscan::metrics::{write_sweep_csv, EvalReport, DEFAULT_SWEEP_K, DEFAULT_SWEEP_T};
use panoscan::model::Model;
use panoscan::policy::{ActionMode, ScanpathRecord};
use panoscan::sphere::ErpImage;
use panoscan::synth::make_dataset;
use panoscan::trainer::{checkpoint_path, evaluate, metrics_path, sweep, train};
use panoscan::{Error, Result};

const SNAPSHOT: &str = "config.toml";

#[derive(Parser)]
#[command(name = "panoscan", version, about = "Learned viewport scanpaths for blind 360-degree image quality assessment")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration. Commands that read a checkpoint fall back to
    /// the snapshot stored next to it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set ppo.gamma=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Ablation preset. Repeatable.
    #[arg(long, value_name = "NAME", global = true)]
    ablate: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, conflicts_with = "single_thread")]
    threads: Option<usize>,
    #[arg(long, global = true)]
    single_thread: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset with train/test manifests.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        /// Train and test fractions, e.g. `0.8,0.2`.
        #[arg(long, value_parser = parse_split)]
        split: Option<(f64, f64)>,
    },
    /// Train policy and assessor jointly.
    Train {
        /// Dataset directory holding train.jsonl and test.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a manifest and report SRCC/PLCC.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        t: Option<usize>,
        /// Per-image predictions; defaults to predictions.json beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print K scanpaths for one panorama as JSON lines.
    Scanpath {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        t: Option<usize>,
        /// Take the most likely viewport at every step.
        #[arg(long)]
        greedy: bool,
    },
    /// Render a visit heatmap over a panorama.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        t: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
    },
    /// Evaluate a grid of K and T values.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        k_values: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        t_values: Option<Vec<usize>>,
    },
}

fn parse_split(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [a, b] => Ok((a.trim().parse().map_err(|e| format!("{e}"))?, b.trim().parse().map_err(|e| format!("{e}"))?)),
        _ => Err(format!("expected two comma-separated fractions, got `{s}`")),
    }
}

impl Global {
    /// Explicit config, else the snapshot beside `near`, else defaults;
    /// then overrides, presets and flags, validated.
    fn resolve(&self, near: Option<&Path>) -> Result<RunConfig> {
        let snapshot = near.and_then(|p| p.parent()).map(|d| d.join(SNAPSHOT)).filter(|p| p.is_file());
        let base = match self.config.as_deref().or(snapshot.as_deref()) {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        for name in &self.ablate {
            cfg.apply_ablation(name.parse::<Ablation>()?);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.single_thread {
            cfg.train.threads = 1;
        } else if let Some(n) = self.threads {
            cfg.train.threads = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!("{} does not exist", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// Snapshot beside a single-file output: `heat.png` gets `heat.config.toml`.
fn snapshot_beside(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{SNAPSHOT}"))
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    require_file(checkpoint)?;
    Model::load(checkpoint, &cfg.policy, &cfg.assessor)
}

fn image_bank(cfg: &RunConfig, erp: &ErpImage) -> Result<FeatureBank> {
    let encoder = FeatureEncoder::new(cfg.policy.feature_dim)?;
    FeatureBank::compute(&encoder, erp, &cfg.grid.build()?, cfg.grid.viewport_res)
}

#[derive(Serialize)]
struct ImagePrediction<'a> {
    image: &'a str,
    mos: f64,
    q_hat: f64,
    per_path: &'a [f64],
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    srcc: f64,
    plcc: f64,
    n: usize,
    k: usize,
    t: usize,
    predictions: Vec<ImagePrediction<'a>>,
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Synth { out, n, split } => {
            let mut cfg = g.resolve(None)?;
            if let Some(n) = n {
                cfg.data.n = n;
            }
            if let Some(s) = split {
                cfg.data.split = s;
            }
            cfg.validate()?;
            create_dir(&out)?;
            let summary = make_dataset(&out, cfg.data.n, cfg.seed, cfg.data.split, &cfg.synth)?;
            cfg.save(&out.join(SNAPSHOT))?;
            println!("{} train / {} test images in {}", summary.train.len(), summary.test.len(), out.display());
        }
        Command::Train { data, out, epochs } => {
            let mut cfg = g.resolve(None)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let (train_m, test_m) = (data.join("train.jsonl"), data.join("test.jsonl"));
            require_file(&train_m)?;
            let builder = EnvBuilder::new(&cfg.grid, cfg.policy.feature_dim, cfg.losses.uses_augmentation())?;
            let threads = cfg.train.threads;
            let train_envs = load_envs(&builder, &train_m, cfg.seed, threads)?;
            let val_envs = if test_m.is_file() { load_envs(&builder, &test_m, cfg.seed, threads)? } else { Vec::new() };
            create_dir(&out)?;
            cfg.save(&out.join(SNAPSHOT))?;
            let outcome = train(&train_envs, &val_envs, &cfg, Some(&out))?;
            let last = outcome.history.last().expect("at least one epoch");
            match last.val {
                Some((s, p)) => println!("trained {} epochs; held-out srcc {s:.4} plcc {p:.4}", outcome.history.len()),
                None => println!("trained {} epochs", outcome.history.len()),
            }
            println!("checkpoint {}\nmetrics {}", checkpoint_path(&out).display(), metrics_path(&out).display());
        }
        Command::Eval { checkpoint, manifest, k, t, out } => {
            let cfg = g.resolve(Some(&checkpoint))?;
            let (k, t) = (k.unwrap_or(cfg.train.k), t.unwrap_or(cfg.train.t));
            require_file(&manifest)?;
            let model = load_model(&cfg, &checkpoint)?;
            let out = out.unwrap_or_else(|| checkpoint.with_file_name("predictions.json"));
            let builder = EnvBuilder::new(&cfg.grid, cfg.policy.feature_dim, false)?;
            let envs = load_envs(&builder, &manifest, cfg.seed, cfg.train.threads)?;
            let (report, preds): (EvalReport, _) = evaluate(&model, &envs, k, t, cfg.seed, cfg.train.threads)?;
            let output = EvalOutput {
                srcc: report.srcc,
                plcc: report.plcc,
                n: report.n,
                k,
                t,
                predictions: envs
                    .iter()
                    .zip(&preds)
                    .map(|(e, p)| ImagePrediction { image: &e.name, mos: e.mos, q_hat: p.q_hat, per_path: &p.per_path })
                    .collect(),
            };
            write_json(&out, &output)?;
            cfg.save(&snapshot_beside(&out))?;
            println!("{}", serde_json::json!({ "srcc": report.srcc, "plcc": report.plcc, "n": report.n, "k": k, "t": t }));
        }
        Command::Scanpath { checkpoint, image, k, t, greedy } => {
            let cfg = g.resolve(Some(&checkpoint))?;
            let (k, t) = (k.unwrap_or(cfg.train.k), t.unwrap_or(cfg.train.t));
            require_file(&image)?;
            let model = load_model(&cfg, &checkpoint)?;
            let erp = ErpImage::load_png(&image)?;
            let bank = image_bank(&cfg, &erp)?;
            let mode = if greedy { ActionMode::Greedy } else { ActionMode::Sample };
            let pred = model.predict(&bank, k, t, cfg.seed, mode)?;
            let grid = cfg.grid.build()?;
            let name = image.display().to_string();
            for (i, (path, score)) in pred.paths.iter().zip(&pred.per_path).enumerate() {
                println!("{}", serde_json::to_string(&ScanpathRecord::new(&name, i, path, &grid, *score))?);
            }
        }
        Command::Heatmap { checkpoint, image, out, k, t, alpha } => {
            let cfg = g.resolve(Some(&checkpoint))?;
            let (k, t) = (k.unwrap_or(cfg.train.k), t.unwrap_or(cfg.train.t));
            require_file(&image)?;
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::Config(format!("--alpha must lie in [0,1], got {alpha}")));
            }
            let model = load_model(&cfg, &checkpoint)?;
            let erp = ErpImage::load_png(&image)?;
            let bank = image_bank(&cfg, &erp)?;
            let paths: Vec<Vec<usize>> = model.scanpaths(&bank, k, t, cfg.seed, ActionMode::Sample)?.into_iter().map(|e| e.path.indices).collect();
            let img = render_heatmap(&erp, &cfg.grid.build()?, &paths, alpha)?;
            img.save_png(&out)?;
            cfg.save(&snapshot_beside(&out))?;
            println!("{}", out.display());
        }
        Command::Sweep { checkpoint, manifest, out, k_values, t_values } => {
            let cfg = g.resolve(Some(&checkpoint))?;
            let ks = k_values.unwrap_or_else(|| DEFAULT_SWEEP_K.to_vec());
            let ts = t_values.unwrap_or_else(|| DEFAULT_SWEEP_T.to_vec());
            if ks.is_empty() || ts.is_empty() || ks.contains(&0) || ts.contains(&0) {
                return Err(Error::Config("--k-values and --t-values must be positive".into()));
            }
            if cfg.policy.mask_revisits {
                if let Some(&t) = ts.iter().find(|&&t| t > cfg.grid.count()) {
                    return Err(Error::Config(format!("T = {t} exceeds the {} viewports while revisits are masked", cfg.grid.count())));
                }
            }
            require_file(&manifest)?;
            let model = load_model(&cfg, &checkpoint)?;
            let builder = EnvBuilder::new(&cfg.grid, cfg.policy.feature_dim, false)?;
            let envs = load_envs(&builder, &manifest, cfg.seed, cfg.train.threads)?;
            let rows = sweep(&model, &envs, &ks, &ts, cfg.seed, cfg.train.threads)?;
            write_sweep_csv(&out, &rows)?;
            cfg.save(&snapshot_beside(&out))?;
            for r in &rows {
                println!("K={:<3} T={:<3} srcc {:.4} plcc {:.4} {:.0} ms", r.k, r.t, r.srcc, r.plcc, r.wall_ms);
            }
        }
    }
    Ok(())
}

/// 2 configuration, 3 data, 4 numerical abort.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::Json(_) | Error::Csv(_) | Error::CheckpointIncompatible { .. } => 3,
        Error::Diverged(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("panoscan: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
