use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hrtrack_core::dataset::{ingest_summary, list_aois, make_inference_pairs, make_training_pairs, read_aoi, write_frames, SceneSpec};
use hrtrack_core::metrics::evaluate_run;
use hrtrack_core::pipeline::{generate_series, run_pipeline, synthesize_dataset, ComparisonReport, ExperimentConfig, StageKind, VARIANT_NAMES};
use hrtrack_core::sr::SrModel;
use hrtrack_core::tracker::TrackerModel;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "hrtrack", version, about = "Track building construction in low-resolution imagery with reference-guided super-resolution")]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for pipeline stages.
    #[arg(long, global = true, default_value = "runs/default")]
    run_dir: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Default architectures: `desk` or `paper`.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Generator variant: ead, ead-lpips or pix2pix.
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    lambda1: Option<f64>,
    #[arg(long, global = true)]
    lambda2: Option<f64>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic AOIs with ground-truth footprints.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 13)]
        count: usize,
    },
    /// Summarize a dataset root after occlusion filtering.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        occlusion_threshold: f64,
    },
    /// List training or inference pairs of one AOI.
    Pair {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        aoi: String,
        #[arg(long)]
        inference: bool,
    },
    /// Train the super-resolution model(s).
    TrainSr,
    /// Generate HR frames for the test AOIs, or for one AOI directory when
    /// `--checkpoint` is given.
    Generate {
        #[arg(long, requires_all = ["aoi", "out"])]
        checkpoint: Option<PathBuf>,
        /// AOI directory (`<root>/<aoi_id>`).
        #[arg(long)]
        aoi: Option<PathBuf>,
        /// Tile size; defaults to the checkpoint's training patch.
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the tracker(s).
    TrainTracker,
    /// Track buildings on every configured image source.
    Track,
    /// Score tracks; standalone when `--pred` and `--labels` are given.
    Evaluate {
        #[arg(long, requires = "labels")]
        pred: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare sources and write report.json, table.txt and figures.
    Compare,
    /// Run the full pipeline.
    Run,
    /// Summarize the configured models or a checkpoint.
    Describe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(p) = &cli.preset {
        if !matches!(p.as_str(), "desk" | "paper") {
            bail!("unknown preset `{p}` (desk, paper)");
        }
        cfg.preset = p.clone();
    }
    if let Some(l) = cli.lambda1 {
        cfg.sr.weights.lambda1 = l;
    }
    if let Some(l) = cli.lambda2 {
        cfg.sr.weights.lambda2 = l;
    }
    if let Some(v) = &cli.variant {
        if !VARIANT_NAMES.contains(&v.as_str()) {
            bail!("unknown variant `{v}` (expected one of {})", VARIANT_NAMES.join(", "));
        }
        let old = std::mem::replace(&mut cfg.sr.variants, vec![v.clone()]);
        cfg.evaluation.sources.retain(|s| !old.contains(s));
        cfg.evaluation.sources.push(v.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_until(cli: &Cli, until: StageKind) -> Result<()> {
    let cfg = load_config(cli)?;
    let summary = run_pipeline(&cfg, &cli.run_dir, until)?;
    for s in &summary.executed {
        println!("ran     {s}");
    }
    for s in &summary.skipped {
        println!("cached  {s}");
    }
    if until == StageKind::Compare {
        let report = ComparisonReport::load(cli.run_dir.join("report.json"))?;
        print!("{}", report.table());
    }
    Ok(())
}

#[derive(Serialize)]
struct GeneratedFrame {
    file: String,
    timestamp: i64,
    gsd: f64,
}

fn generate_standalone(checkpoint: &Path, aoi_dir: &Path, patch: Option<usize>, out: &Path) -> Result<()> {
    let model = SrModel::load(checkpoint)?;
    let root = aoi_dir.parent().unwrap_or(Path::new("."));
    let id = aoi_dir.file_name().context("AOI path has no directory name")?.to_string_lossy();
    let data = read_aoi(root, &id)?;
    let series = generate_series(&model, &data, patch.unwrap_or(model.config.patch))?;
    write_frames(out, &series)?;
    let frames: Vec<GeneratedFrame> = series
        .frames()
        .iter()
        .map(|f| GeneratedFrame { file: format!("m{:04}.png", f.timestamp()), timestamp: f.timestamp(), gsd: f.gsd() })
        .collect();
    let manifest = out.join("manifest.json");
    std::fs::write(&manifest, serde_json::to_string_pretty(&frames)?).with_context(|| format!("writing {}", manifest.display()))?;
    println!("wrote {} frames to {}", frames.len(), out.display());
    Ok(())
}

fn describe(cli: &Cli, checkpoint: Option<&Path>) -> Result<()> {
    if let Some(path) = checkpoint {
        return match SrModel::load(path) {
            Ok(m) => {
                print!("{}", m.describe());
                Ok(())
            }
            Err(_) => {
                let t = TrackerModel::load(path).with_context(|| format!("{} is neither an SR nor a tracker checkpoint", path.display()))?;
                print!("{}", t.describe());
                Ok(())
            }
        };
    }
    let cfg = load_config(cli)?;
    for v in &cfg.sr.variants {
        let (variant, weights) = hrtrack_core::pipeline::resolve_variant(v, cfg.sr.weights)?;
        println!("== {v} (λ1 = {}, λ2 = {})", weights.lambda1, weights.lambda2);
        print!("{}", SrModel::init(cfg.generator(variant)?, cfg.seed)?.describe());
    }
    println!("== tracker");
    print!("{}", TrackerModel::init(cfg.tracker_config()?, cfg.seed)?.describe());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match &cli.command {
        Command::Synth { out, count } => {
            let cfg = load_config(&cli)?;
            let template = SceneSpec { seed: cfg.seed, ..cfg.dataset.scene.clone() };
            let ids = synthesize_dataset(out, &template, *count)?;
            println!("wrote {} AOIs to {}", ids.len(), out.display());
        }
        Command::Ingest { root, occlusion_threshold } => {
            let ids = list_aois(root)?;
            let summary = ingest_summary(root, &ids, *occlusion_threshold)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Pair { root, aoi, inference } => {
            let data = read_aoi(root, aoi)?;
            let pairs = if *inference {
                let latest = data.hr.frames().last().context("AOI has no HR frames")?;
                make_inference_pairs(&data.lr, latest)?
            } else {
                make_training_pairs(&data.lr, &data.hr)?
            };
            println!("t_index\tt_ref_index\tlr_month\tref_month\ttime");
            for p in &pairs {
                println!(
                    "{}\t{}\t{}\t{}\t{:.4}",
                    p.t_index,
                    p.t_ref_index,
                    p.lr_target.timestamp(),
                    p.hr_reference.timestamp(),
                    p.time
                );
            }
            eprintln!("{} pairs", pairs.len());
        }
        Command::TrainSr => run_until(&cli, StageKind::TrainSr)?,
        Command::Generate { checkpoint: Some(ckpt), aoi, patch, out } => {
            let (aoi, out) = (aoi.as_deref().context("--aoi is required")?, out.as_deref().context("--out is required")?);
            generate_standalone(ckpt, aoi, *patch, out)?;
        }
        Command::Generate { checkpoint: None, .. } => run_until(&cli, StageKind::Generate)?,
        Command::TrainTracker => run_until(&cli, StageKind::TrainTracker)?,
        Command::Track => run_until(&cli, StageKind::Track)?,
        Command::Evaluate { pred: Some(pred), labels, out } => {
            let labels = labels.as_ref().context("--labels is required with --pred")?;
            let report = evaluate_run(pred, labels, BTreeMap::new())?;
            print!("{}", report.table());
            if let Some(out) = out {
                report.save(out)?;
            }
        }
        Command::Evaluate { pred: None, .. } => run_until(&cli, StageKind::Evaluate)?,
        Command::Compare | Command::Run => run_until(&cli, StageKind::Compare)?,
        Command::Describe { checkpoint } => describe(&cli, checkpoint.as_deref())?,
        Command::Config => print!("{}", load_config(&cli)?.to_toml()?),
    }
    Ok(())
}
