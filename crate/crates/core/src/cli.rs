//! Command-line front end: argument parsing, artifact files, run manifests.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::ndibank::UpdateMode;
use crate::network::{Checkpoint, ModelParams};
use crate::pseudolabel::NgisMode;
use crate::synthgen::{generate_dataset, Dataset, GenConfig};
use crate::trainer::{ablation_cells, ablation_csv, run_cells, seed_means, train_with_observer, TrainConfig, Variant};

/// Exit status for a missing input file.
pub const EXIT_MISSING_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "ndi-wsod",
    version,
    about = "Weakly supervised detection on a synthetic proposal benchmark"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    Generate(GenerateArgs),
    /// Train a model on a dataset file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset file.
    Eval(EvalArgs),
    /// Run the ablation and bank-construction grids.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Flat TOML file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset file.
    #[arg(long)]
    pub out: PathBuf,
}

/// Training overrides shared by `train` and `ablate`.
#[derive(Debug, Clone, Args)]
pub struct TrainOverrides {
    /// Flat TOML file with training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = ["baseline", "ncl", "ngis", "full"])]
    pub ablate: Option<String>,
    #[arg(long)]
    pub ngis_mode: Option<NgisMode>,
    #[arg(long)]
    pub bank: Option<UpdateMode>,
    #[arg(long)]
    pub queue_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output `eval.json` path.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat TOML training config; only its evaluation settings are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of consecutive seeds per cell, starting at `--seed`.
    #[arg(long, default_value_t = 3)]
    pub num_seeds: u64,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

/// An input file that does not exist.
#[derive(Debug, thiserror::Error)]
#[error("input file not found: {}", .0.display())]
pub struct MissingInput(pub PathBuf);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub wall_clock_secs: Option<f64>,
    /// `running`, `ok` or `failed`.
    pub status: String,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// A manifest written when the run starts and rewritten when it ends.
struct ManifestWriter {
    path: PathBuf,
    manifest: RunManifest,
    start: Instant,
}

impl ManifestWriter {
    fn begin(
        path: PathBuf,
        command: &str,
        config: &impl Serialize,
        seed: u64,
        inputs: Vec<PathBuf>,
    ) -> anyhow::Result<Self> {
        let manifest = RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            inputs,
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: unix_now(),
            finished_unix: None,
            wall_clock_secs: None,
            status: "running".into(),
        };
        write_json(&path, &manifest, true)?;
        Ok(ManifestWriter {
            path,
            manifest,
            start: Instant::now(),
        })
    }

    fn finish<T>(mut self, result: anyhow::Result<(T, Vec<PathBuf>)>) -> anyhow::Result<T> {
        self.manifest.finished_unix = Some(unix_now());
        self.manifest.wall_clock_secs = Some(self.start.elapsed().as_secs_f64());
        match result {
            Ok((value, outputs)) => {
                self.manifest.outputs = outputs;
                self.manifest.status = "ok".into();
                write_json(&self.path, &self.manifest, true)?;
                Ok(value)
            }
            Err(e) => {
                self.manifest.status = "failed".into();
                // The original error matters more than a failed manifest write.
                let _ = write_json(&self.path, &self.manifest, true);
                Err(e)
            }
        }
    }
}

pub fn write_json(path: &Path, value: &impl Serialize, pretty: bool) -> anyhow::Result<()> {
    let text = if pretty {
        serde_json::to_string_pretty(value)?
    } else {
        serde_json::to_string(value)?
    };
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn read_input(path: &Path) -> anyhow::Result<String> {
    if !path.exists() {
        return Err(MissingInput(path.to_path_buf()).into());
    }
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

pub fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let text = read_input(path)?;
    let ds: Dataset =
        serde_json::from_str(&text).with_context(|| format!("{} is not a dataset file", path.display()))?;
    ds.validate()
        .with_context(|| format!("invalid dataset {}", path.display()))?;
    Ok(ds)
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = read_input(path)?;
    toml::from_str(&text).with_context(|| format!("cannot parse config {}", path.display()))
}

/// Config file values, then command-line overrides.
pub fn resolve_train_config(o: &TrainOverrides) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = match &o.config {
        Some(p) => load_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(v) = &o.ablate {
        let v: Variant = v.parse().map_err(anyhow::Error::msg)?;
        v.apply(&mut cfg);
    }
    if let Some(m) = o.ngis_mode {
        cfg.ngis_mode = m;
    }
    if let Some(b) = o.bank {
        cfg.use_cmu = b == UpdateMode::Cmu;
    }
    if let Some(l) = o.queue_len {
        cfg.queue_len = l;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn debug_seeds() -> bool {
    std::env::var("NDI_LOG").is_ok_and(|v| v.eq_ignore_ascii_case("debug"))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn ensure_finite(report: &EvalReport) -> anyhow::Result<()> {
    let values = [report.map, report.corloc]
        .into_iter()
        .chain(report.per_class_ap.iter().flatten().copied())
        .chain(report.per_class_corloc.iter().flatten().copied());
    for v in values {
        if !v.is_finite() {
            bail!("evaluation produced a non-finite metric");
        }
    }
    Ok(())
}

pub fn cmd_generate(args: &GenerateArgs) -> anyhow::Result<Dataset> {
    let cfg: GenConfig = match &args.config {
        Some(p) => load_toml(p)?,
        None => GenConfig::default(),
    };
    cfg.validate()?;
    let manifest_path = manifest_path_for(&args.out);
    let inputs = args.config.iter().cloned().collect();
    let m = ManifestWriter::begin(manifest_path, "generate", &cfg, args.seed, inputs)?;
    m.finish((|| {
        let ds = generate_dataset(&cfg, args.seed)?;
        write_json(&args.out, &ds, false)?;
        let n: usize = ds.train.iter().chain(&ds.test).map(|i| i.proposals.len()).sum();
        println!(
            "wrote {}: {} train + {} test images, {} proposals, label histogram {:?}",
            args.out.display(),
            ds.train.len(),
            ds.test.len(),
            n,
            ds.label_histogram()
        );
        Ok((ds, vec![args.out.clone()]))
    })())
}

/// `<file>.manifest.json` next to a single output file.
fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<EvalReport> {
    let cfg = resolve_train_config(&args.overrides)?;
    let ds = load_dataset(&args.dataset)?;
    create_dir(&args.out)?;
    let mut inputs = vec![args.dataset.clone()];
    inputs.extend(args.overrides.config.iter().cloned());
    let m = ManifestWriter::begin(args.out.join("manifest.json"), "train", &cfg, cfg.seed, inputs)?;
    m.finish((|| {
        let mut seed_log = String::new();
        let debug = debug_seeds();
        let out = train_with_observer(&cfg, &ds, |trace| {
            if debug {
                seed_log.push_str(&serde_json::to_string(trace).expect("trace serializes"));
                seed_log.push('\n');
            }
        })?;
        ensure_finite(&out.report.metrics)?;
        let files = [
            (
                "checkpoint.json",
                serde_json::to_string(&out.params.to_checkpoint(&out.report.config_hash))?,
            ),
            ("bank.json", serde_json::to_string(&out.bank)?),
            ("report.json", serde_json::to_string(&out.report)?),
        ];
        let mut written = Vec::new();
        for (name, text) in files {
            let p = args.out.join(name);
            std::fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))?;
            written.push(p);
        }
        let csv = args.out.join("metrics.csv");
        std::fs::write(&csv, out.report.curves.to_csv()).with_context(|| format!("cannot write {}", csv.display()))?;
        written.push(csv);
        if debug {
            let p = args.out.join("seeds.jsonl");
            std::fs::write(&p, seed_log).with_context(|| format!("cannot write {}", p.display()))?;
            eprintln!("seed dump: {}", p.display());
            written.push(p);
        }
        let r = &out.report.metrics;
        println!(
            "trained {} iterations in {:.1}s: mAP {:.4}, CorLoc {:.4}",
            cfg.iters, out.report.wall_clock_secs, r.map, r.corloc
        );
        Ok((out.report.metrics, written))
    })())
}

pub fn load_checkpoint(path: &Path) -> anyhow::Result<ModelParams> {
    let text = read_input(path)?;
    let ck: Checkpoint =
        serde_json::from_str(&text).with_context(|| format!("{} is not a checkpoint", path.display()))?;
    Ok(ModelParams::from_checkpoint(&ck)?)
}

pub fn cmd_eval(args: &EvalArgs) -> anyhow::Result<EvalReport> {
    let eval_cfg = match &args.config {
        Some(p) => load_toml::<TrainConfig>(p)?.eval_config(),
        None => EvalConfig::default(),
    };
    let params = load_checkpoint(&args.checkpoint)?;
    let ds = load_dataset(&args.dataset)?;
    if params.feature_dim() != ds.feature_dim() || params.num_classes() != ds.num_classes() {
        bail!(
            "dimension mismatch: checkpoint has feature_dim={} num_classes={}, dataset has feature_dim={} num_classes={}",
            params.feature_dim(),
            params.num_classes(),
            ds.feature_dim(),
            ds.num_classes()
        );
    }
    let inputs = vec![args.checkpoint.clone(), args.dataset.clone()];
    let m = ManifestWriter::begin(manifest_path_for(&args.out), "eval", &eval_cfg, ds.seed, inputs)?;
    m.finish((|| {
        let report = evaluate(&params, &ds, &eval_cfg)?;
        ensure_finite(&report)?;
        write_json(&args.out, &report, true)?;
        println!("mAP {:.4}, CorLoc {:.4}", report.map, report.corloc);
        Ok((report, vec![args.out.clone()]))
    })())
}

pub fn cmd_ablate(args: &AblateArgs) -> anyhow::Result<String> {
    let base = resolve_train_config(&args.overrides)?;
    if args.num_seeds == 0 {
        bail!("--num-seeds must be at least 1");
    }
    let ds = load_dataset(&args.dataset)?;
    create_dir(&args.out)?;
    let seeds: Vec<u64> = (0..args.num_seeds).map(|i| base.seed + i).collect();
    let mut inputs = vec![args.dataset.clone()];
    inputs.extend(args.overrides.config.iter().cloned());
    let m = ManifestWriter::begin(args.out.join("manifest.json"), "ablate", &base, base.seed, inputs)?;
    m.finish((|| {
        let rows = run_cells(&ds, &base, &ablation_cells(&base, &seeds))?;
        if rows.iter().any(|r| !r.map.is_finite() || !r.corloc.is_finite()) {
            bail!("ablation produced a non-finite metric");
        }
        let csv = ablation_csv(&rows);
        let p = args.out.join("ablation.csv");
        std::fs::write(&p, &csv).with_context(|| format!("cannot write {}", p.display()))?;
        println!("{:<10} {:>2} {:>8} {:>8}", "variant", "L", "mAP", "CorLoc");
        for (v, l, map, cl) in seed_means(&rows) {
            println!("{:<10} {:>2} {:>8.4} {:>8.4}", v.name(), l, map, cl);
        }
        Ok((csv, vec![p]))
    })())
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a).map(drop),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Eval(a) => cmd_eval(a).map(drop),
        Command::Ablate(a) => cmd_ablate(a).map(drop),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<MissingInput>().is_some() {
                EXIT_MISSING_INPUT
            } else {
                1
            }
        }
    }
}
