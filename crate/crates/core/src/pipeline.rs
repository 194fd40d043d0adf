//! Experiment orchestration: one configuration file drives data
//! preparation, super-resolution training and generation, tracker training,
//! tracking, evaluation and the cross-source comparison.
//!
//! Every stage records a hash of the configuration it depends on (plus the
//! hashes of its upstream stages) in `run_manifest.json`. A rerun skips any
//! stage whose hash is unchanged and whose outputs are still on disk, so
//! editing one section of the config only reruns the stages downstream of
//! it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hrtrack_nn::exec;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    list_aois, make_inference_pairs, make_training_pairs, read_aoi, read_frames, save_png, split_aois, synthesize_aoi,
    write_aoi, write_frames, AoiData, AoiSplit, SceneSpec,
};
use crate::error::{file_err, Error, Result};
use crate::footprint::FootprintSet;
use crate::metrics::{evaluate_run, format_table, MetricsReport};
use crate::objective::{train_sr, train_tracker, LabeledFrame, LossWeights, LpipsNet, TrainConfig, TrainOutputs};
use crate::patch::generate_full;
use crate::raster::{ImageTimeSeries, RasterImage};
use crate::sr::{GeneratorConfig, SrModel, Variant};
use crate::tracker::{TrackerConfig, TrackerModel};

/// Generator variants accepted in `sr.variants`.
pub const VARIANT_NAMES: [&str; 3] = ["ead", "ead-lpips", "pix2pix"];

/// Architecture and loss weights of a named variant. `ead` drops the
/// perceptual term; `ead-lpips` and `pix2pix` keep `base.lambda2`.
pub fn resolve_variant(name: &str, base: LossWeights) -> Result<(Variant, LossWeights)> {
    match name {
        "ead" => Ok((Variant::Ead, LossWeights { lambda2: 0.0, ..base })),
        "ead-lpips" => Ok((Variant::Ead, base)),
        "pix2pix" => Ok((Variant::Pix2pix, base)),
        other => Err(Error::Config(format!("unknown variant `{other}` (expected one of {})", VARIANT_NAMES.join(", ")))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Existing dataset root in the standard layout. When absent, scenes
    /// are synthesized into `<run>/data` from `scene`.
    pub root: Option<PathBuf>,
    pub train_aois: usize,
    pub test_aois: usize,
    pub occlusion_threshold: f64,
    /// Template for synthetic scenes; each scene gets its own seed.
    pub scene: SceneSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { root: None, train_aois: 10, test_aois: 3, occlusion_threshold: 0.5, scene: SceneSpec::default() }
    }
}

fn sr_train<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    TrainConfig::deserialize_over(d, TrainConfig::sr_default())
}

fn tracker_train<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    TrainConfig::deserialize_over(d, TrainConfig::tracker_default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrSection {
    pub variants: Vec<String>,
    /// Generator architecture; the preset's when absent.
    pub generator: Option<GeneratorConfig>,
    pub weights: LossWeights,
    #[serde(deserialize_with = "sr_train")]
    pub train: TrainConfig,
    pub lpips_seed: u64,
    /// Optional checkpoint of perceptual-network weights.
    pub lpips_weights: Option<PathBuf>,
}

impl Default for SrSection {
    fn default() -> Self {
        Self {
            variants: vec!["ead-lpips".into()],
            generator: None,
            weights: LossWeights::default(),
            train: TrainConfig::sr_default(),
            lpips_seed: 0,
            lpips_weights: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerSection {
    pub config: Option<TrackerConfig>,
    #[serde(deserialize_with = "tracker_train")]
    pub train: TrainConfig,
    /// 1: tracker trained on ground-truth HR. 2: one tracker per source,
    /// trained on that source's imagery of the training AOIs.
    pub settings: Vec<u8>,
}

impl Default for TrackerSection {
    fn default() -> Self {
        Self { config: None, train: TrainConfig::tracker_default(), settings: vec![1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// `hr`, `lr` (bilinear upsampling), generator variants, or names of
    /// external directories.
    pub sources: Vec<String>,
    /// External imagery laid out as `<dir>/<aoi>/m{month:04}.png`.
    pub external: BTreeMap<String, PathBuf>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { sources: vec!["hr".into(), "lr".into(), "ead-lpips".into()], external: BTreeMap::new() }
    }
}

/// One experiment. Seeds of every stage derive from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// `desk` or `paper`: picks default architectures.
    pub preset: String,
    /// Single-threaded execution.
    pub deterministic: bool,
    pub dataset: DatasetSection,
    pub sr: SrSection,
    pub tracker: TrackerSection,
    pub evaluation: EvaluationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: "desk".into(),
            deterministic: false,
            dataset: DatasetSection::default(),
            sr: SrSection::default(),
            tracker: TrackerSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
        Self::from_toml(&text).map_err(|e| file_err(path, e))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Generator architecture for `variant`.
    pub fn generator(&self, variant: Variant) -> Result<GeneratorConfig> {
        let base = match &self.sr.generator {
            Some(g) => g.clone(),
            None => GeneratorConfig::preset(&self.preset)?,
        };
        Ok(base.with_variant(variant))
    }

    pub fn tracker_config(&self) -> Result<TrackerConfig> {
        match &self.tracker.config {
            Some(c) => Ok(c.clone()),
            None => TrackerConfig::preset(&self.preset),
        }
    }

    fn is_generated(&self, source: &str) -> bool {
        self.sr.variants.iter().any(|v| v == source)
    }

    /// Check everything that can be checked before any stage runs.
    pub fn validate(&self) -> Result<()> {
        if self.sr.variants.is_empty() && self.evaluation.sources.iter().any(|s| VARIANT_NAMES.contains(&s.as_str())) {
            return Err(Error::Config("evaluation lists a generated source but sr.variants is empty".into()));
        }
        for v in &self.sr.variants {
            let (variant, weights) = resolve_variant(v, self.sr.weights)?;
            weights.validate()?;
            self.generator(variant)?.validate()?;
        }
        self.sr.train.validate()?;
        self.tracker.train.validate()?;
        self.tracker_config()?.validate()?;
        if self.tracker.settings.is_empty() || self.tracker.settings.iter().any(|s| !matches!(s, 1 | 2)) {
            return Err(Error::Config(format!("tracker.settings must be a non-empty subset of [1, 2], got {:?}", self.tracker.settings)));
        }
        for s in &self.evaluation.sources {
            let known = s == "hr" || s == "lr" || self.is_generated(s) || self.evaluation.external.contains_key(s);
            if !known {
                return Err(Error::Config(format!(
                    "evaluation source `{s}` is neither hr, lr, a configured variant nor an external directory"
                )));
            }
        }
        if self.evaluation.sources.is_empty() {
            return Err(Error::Config("evaluation.sources is empty".into()));
        }
        if self.dataset.train_aois == 0 || self.dataset.test_aois == 0 {
            return Err(Error::Config("need at least one training and one test AOI".into()));
        }
        if self.dataset.root.is_none() {
            let scene = &self.dataset.scene;
            scene.validate()?;
            for v in &self.sr.variants {
                let g = self.generator(resolve_variant(v, self.sr.weights)?.0)?;
                if !scene.hr_size.is_multiple_of(g.patch) {
                    return Err(Error::Config(format!(
                        "synthetic frames of {0}×{0} cannot be tiled by the generator's {1}×{1} patches",
                        scene.hr_size, g.patch
                    )));
                }
                if g.bands != scene.bands {
                    return Err(Error::Config(format!("generator expects {} bands, scenes have {}", g.bands, scene.bands)));
                }
            }
        }
        Ok(())
    }
}

/// Pipeline stages in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageKind {
    Data,
    Split,
    TrainSr,
    Generate,
    TrainTracker,
    Track,
    Evaluate,
    Compare,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Data => "data",
            StageKind::Split => "split",
            StageKind::TrainSr => "train-sr",
            StageKind::Generate => "generate",
            StageKind::TrainTracker => "train-tracker",
            StageKind::Track => "track",
            StageKind::Evaluate => "evaluate",
            StageKind::Compare => "compare",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub hash: String,
    /// Output paths relative to the run directory.
    pub outputs: Vec<String>,
    pub seconds: f64,
}

/// Stage hashes plus a content hash of every artifact.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: BTreeMap<String, StageRecord>,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    fn path(run_dir: &Path) -> PathBuf {
        run_dir.join("run_manifest.json")
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = Self::path(run_dir);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| file_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| file_err(&path, e))
    }

    fn save(&self, run_dir: &Path) -> Result<()> {
        let path = Self::path(run_dir);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| file_err(&path, e))
    }
}

/// Which stages ran and which were cache hits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn files_under(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let full = root.join(rel);
    if full.is_file() {
        out.push(rel.to_path_buf());
    } else if full.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(&full).map_err(|e| file_err(&full, e))?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            files_under(root, &rel.join(e.file_name()), out)?;
        }
    }
    Ok(())
}

struct Runner<'a> {
    run_dir: &'a Path,
    manifest: RunManifest,
    limit: StageKind,
    summary: RunSummary,
}

impl Runner<'_> {
    /// Run `body` unless a previous run recorded the same hash and every
    /// output still exists. Returns the stage hash.
    fn stage<K: Serialize>(
        &mut self,
        kind: StageKind,
        name: &str,
        key: &K,
        deps: &[&str],
        outputs: &[PathBuf],
        body: impl FnOnce() -> Result<()>,
    ) -> Result<String> {
        let mut material = serde_json::to_vec(&(name, key))?;
        for d in deps {
            material.extend_from_slice(d.as_bytes());
        }
        let hash = sha256_hex(&material);
        if kind > self.limit {
            return Ok(hash);
        }
        let cached = self.manifest.stages.get(name).is_some_and(|r| r.hash == hash)
            && outputs.iter().all(|o| self.run_dir.join(o).exists());
        if cached {
            log::info!("stage {name}: cached");
            self.summary.skipped.push(name.to_string());
            return Ok(hash);
        }
        log::info!("stage {name}: running");
        let start = Instant::now();
        body().map_err(|e| Error::Stage { stage: name.to_string(), source: Box::new(e) })?;
        let mut files = Vec::new();
        for o in outputs {
            files_under(self.run_dir, o, &mut files)?;
        }
        for f in files {
            let full = self.run_dir.join(&f);
            let bytes = std::fs::read(&full).map_err(|e| file_err(&full, e))?;
            self.manifest.artifacts.insert(f.to_string_lossy().into_owned(), sha256_hex(&bytes));
        }
        self.manifest.stages.insert(
            name.to_string(),
            StageRecord {
                hash: hash.clone(),
                outputs: outputs.iter().map(|o| o.to_string_lossy().into_owned()).collect(),
                seconds: start.elapsed().as_secs_f64(),
            },
        );
        self.manifest.save(self.run_dir)?;
        self.summary.executed.push(name.to_string());
        Ok(hash)
    }
}

/// Where each artifact of a run lives.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub run_dir: PathBuf,
    pub data_root: PathBuf,
}

impl RunLayout {
    pub fn new(cfg: &ExperimentConfig, run_dir: impl Into<PathBuf>) -> Self {
        let run_dir = run_dir.into();
        let data_root = cfg.dataset.root.clone().unwrap_or_else(|| run_dir.join("data"));
        Self { run_dir, data_root }
    }

    pub fn split(&self) -> PathBuf {
        self.run_dir.join("split.json")
    }

    pub fn sr_checkpoint(&self, variant: &str) -> PathBuf {
        self.run_dir.join("sr").join(variant).join("model.ckpt")
    }

    pub fn generated(&self, variant: &str) -> PathBuf {
        self.run_dir.join("generated").join(variant)
    }

    pub fn tracker_checkpoint(&self, setting: u8, source: &str) -> PathBuf {
        match setting {
            1 => self.run_dir.join("tracker").join("s1").join("model.ckpt"),
            _ => self.run_dir.join("tracker").join("s2").join(source).join("model.ckpt"),
        }
    }

    pub fn tracks(&self, setting: u8, source: &str) -> PathBuf {
        self.run_dir.join("tracks").join(format!("s{setting}")).join(source)
    }

    pub fn source_report(&self, setting: u8, source: &str) -> PathBuf {
        self.run_dir.join("reports").join(format!("s{setting}")).join(format!("{source}.json"))
    }

    pub fn report(&self) -> PathBuf {
        self.run_dir.join("report.json")
    }
}

fn rel(layout: &RunLayout, p: &Path) -> PathBuf {
    p.strip_prefix(&layout.run_dir).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
}

fn save_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| file_err(path, e))
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| file_err(path, e))
}

/// Synthesize `count` scenes into `root`, seeded from `template.seed`.
pub fn synthesize_dataset(root: &Path, template: &SceneSpec, count: usize) -> Result<Vec<String>> {
    let specs: Vec<SceneSpec> = (0..count).map(|i| SceneSpec { seed: template.seed * 10_000 + i as u64, ..template.clone() }).collect();
    let written = exec::map_indexed(specs.len(), |i| -> Result<String> {
        let data = synthesize_aoi(&specs[i])?;
        write_aoi(root, &data)?;
        Ok(data.aoi_id)
    });
    written.into_iter().collect()
}

fn load_aoi(layout: &RunLayout, cfg: &ExperimentConfig, id: &str) -> Result<AoiData> {
    read_aoi(&layout.data_root, id)?.filtered(cfg.dataset.occlusion_threshold)
}

/// The LR series bilinearly resized to the HR frame size.
pub fn upsampled_lr(aoi: &AoiData) -> Result<ImageTimeSeries> {
    let (h, w) = match aoi.hr.frames().first() {
        Some(f) => (f.height(), f.width()),
        None => return Err(Error::EmptySeries(format!("{} has no HR frames", aoi.aoi_id))),
    };
    let gsd = aoi.hr.frames()[0].gsd();
    let frames = aoi.lr.frames().iter().map(|f| Ok(f.resize_to(h, w)?.with_gsd(gsd))).collect::<Result<Vec<_>>>()?;
    ImageTimeSeries::new(aoi.aoi_id.clone(), frames)
}

/// Generate one HR frame per LR frame, each referencing the newest HR frame,
/// tiling every frame by `patch`.
pub fn generate_series(model: &SrModel, aoi: &AoiData, patch: usize) -> Result<ImageTimeSeries> {
    let latest = aoi.hr.frames().last().ok_or_else(|| Error::EmptySeries(format!("{} has no HR frames", aoi.aoi_id)))?;
    let pairs = make_inference_pairs(&aoi.lr, latest)?;
    let frames = exec::map_indexed(pairs.len(), |i| -> Result<RasterImage> {
        let out = generate_full(model, &pairs[i], pairs[i].time, patch)?;
        Ok(out.from_model_space()?.with_timestamp(pairs[i].lr_target.timestamp()).with_aoi(aoi.aoi_id.clone()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    ImageTimeSeries::new(aoi.aoi_id.clone(), frames)
}

/// Frames of one image source for one AOI, in storage space at HR size.
fn source_series(cfg: &ExperimentConfig, layout: &RunLayout, source: &str, aoi: &AoiData) -> Result<ImageTimeSeries> {
    let gsd = aoi.hr.frames().first().map_or(1.0, RasterImage::gsd);
    match source {
        "hr" => Ok(aoi.hr.clone()),
        "lr" => upsampled_lr(aoi),
        s if cfg.is_generated(s) => read_frames(layout.generated(s).join(&aoi.aoi_id), &aoi.aoi_id, gsd),
        s => match cfg.evaluation.external.get(s) {
            Some(dir) => read_frames(dir.join(&aoi.aoi_id), &aoi.aoi_id, gsd),
            None => Err(Error::Config(format!("unknown source `{s}`"))),
        },
    }
}

fn labeled_frames(series: &ImageTimeSeries, labels: &FootprintSet) -> Vec<LabeledFrame> {
    series
        .frames()
        .iter()
        .enumerate()
        .map(|(k, f)| LabeledFrame { image: f.clone(), mask: labels.mask_at(k, f.height(), f.width()) })
        .collect()
}

/// Per-source results of one tracker setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingComparison {
    pub setting: u8,
    pub reports: BTreeMap<String, MetricsReport>,
    /// Sources whose outputs were missing or failed to evaluate.
    pub missing: Vec<String>,
    /// For each generated variant: whether TS(hr) ≥ TS(variant) ≥ TS(lr).
    pub ordering: BTreeMap<String, OrderingCheck>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub ts_hr: f64,
    pub ts_generated: f64,
    pub ts_lr: f64,
    /// `ts_hr ≥ ts_generated`.
    pub hr_at_least_generated: bool,
    /// `ts_generated > ts_lr`.
    pub generated_above_lr: bool,
    /// `ts_hr ≥ ts_generated ≥ ts_lr`.
    pub holds: bool,
}

impl OrderingCheck {
    pub fn new(ts_hr: f64, ts_generated: f64, ts_lr: f64) -> Self {
        Self {
            ts_hr,
            ts_generated,
            ts_lr,
            hr_at_least_generated: ts_hr >= ts_generated,
            generated_above_lr: ts_generated > ts_lr,
            holds: ts_hr >= ts_generated && ts_generated >= ts_lr,
        }
    }
}

/// The run's final report: one comparison per tracker setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub preset: String,
    pub seed: u64,
    pub settings: Vec<SettingComparison>,
}

impl ComparisonReport {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_json(path.as_ref())
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        for s in &self.settings {
            let _ = writeln!(out, "Setting {}", s.setting);
            let rows: Vec<(String, [f64; 4])> = s.reports.iter().map(|(k, r)| (k.clone(), r.values())).collect();
            out.push_str(&format_table("Source", &rows));
            for m in &s.missing {
                let _ = writeln!(out, "{m}: missing");
            }
            for (v, o) in &s.ordering {
                let _ = writeln!(
                    out,
                    "ordering TS(hr) {:.3} ≥ TS({v}) {:.3} ≥ TS(lr) {:.3}: {}",
                    o.ts_hr,
                    o.ts_generated,
                    o.ts_lr,
                    if o.holds { "holds" } else { "violated" }
                );
            }
            out.push('\n');
        }
        out
    }
}

/// Sources that need a setting-2 tracker of their own.
fn setting_sources(cfg: &ExperimentConfig, setting: u8) -> Vec<String> {
    match setting {
        1 => vec!["hr".to_string()],
        _ => cfg.evaluation.sources.clone(),
    }
}

/// Run every stage up to and including `until`, reusing cached outputs.
pub fn run_pipeline(cfg: &ExperimentConfig, run_dir: impl AsRef<Path>, until: StageKind) -> Result<RunSummary> {
    cfg.validate()?;
    let run_dir = run_dir.as_ref();
    std::fs::create_dir_all(run_dir).map_err(|e| file_err(run_dir, e))?;
    if cfg.deterministic {
        exec::set_parallel(false);
    }
    std::fs::write(run_dir.join("config.toml"), cfg.to_toml()?).map_err(|e| file_err(run_dir, e))?;
    let layout = RunLayout::new(cfg, run_dir);
    let mut runner = Runner {
        run_dir,
        manifest: RunManifest::load(run_dir)?,
        limit: until,
        summary: RunSummary { run_dir: run_dir.to_path_buf(), ..Default::default() },
    };

    // Data.
    let n_aois = cfg.dataset.train_aois + cfg.dataset.test_aois;
    let data_key = (&cfg.dataset, cfg.seed);
    let data_out: Vec<PathBuf> = if cfg.dataset.root.is_none() { vec![PathBuf::from("data")] } else { vec![] };
    let data_hash = runner.stage(StageKind::Data, "data", &data_key, &[], &data_out, || {
        match &cfg.dataset.root {
            Some(root) => {
                let ids = list_aois(root)?;
                if ids.len() < n_aois {
                    return Err(Error::Invalid(format!("{} has {} AOIs, {n_aois} needed", root.display(), ids.len())));
                }
                Ok(())
            }
            None => {
                let template = SceneSpec { seed: cfg.seed, ..cfg.dataset.scene.clone() };
                synthesize_dataset(&layout.data_root, &template, n_aois).map(|_| ())
            }
        }
    })?;

    // Split.
    let split_key = (cfg.dataset.train_aois, cfg.dataset.test_aois, cfg.seed);
    let split_hash = runner.stage(StageKind::Split, "split", &split_key, &[&data_hash], &[PathBuf::from("split.json")], || {
        let ids = list_aois(&layout.data_root)?;
        let split = split_aois(&ids, cfg.dataset.train_aois, cfg.dataset.test_aois, cfg.seed)?;
        save_json(&layout.split(), &split)
    })?;
    let split = || -> Result<AoiSplit> { load_json(&layout.split()) };
    let needs_train_sources = cfg.tracker.settings.contains(&2);

    // Super-resolution training and generation, per variant.
    let mut gen_hashes: BTreeMap<String, String> = BTreeMap::new();
    for v in &cfg.sr.variants {
        let (variant, weights) = resolve_variant(v, cfg.sr.weights)?;
        let gcfg = cfg.generator(variant)?;
        let train_cfg = TrainConfig { seed: cfg.seed, ..cfg.sr.train.clone() };
        let ckpt = layout.sr_checkpoint(v);
        let key = (&gcfg, weights, &train_cfg, cfg.sr.lpips_seed, &cfg.sr.lpips_weights, cfg.dataset.occlusion_threshold);
        let sr_dir = rel(&layout, ckpt.parent().expect("has parent"));
        let train_hash = runner.stage(StageKind::TrainSr, &format!("train-sr:{v}"), &key, &[&split_hash], std::slice::from_ref(&sr_dir), || {
            let split = split()?;
            let mut samples = Vec::new();
            for id in &split.train_aois {
                let aoi = load_aoi(&layout, cfg, id)?;
                samples.extend(make_training_pairs(&aoi.lr, &aoi.hr)?);
            }
            let mut net = LpipsNet::seeded(gcfg.bands, cfg.sr.lpips_seed);
            if let Some(w) = &cfg.sr.lpips_weights {
                net.load_weights(w)?;
            }
            let mut model = SrModel::init(gcfg.clone(), cfg.seed)?;
            let dir = layout.run_dir.join(&sr_dir);
            let log_csv = dir.join("loss.csv");
            if log_csv.exists() {
                std::fs::remove_file(&log_csv).map_err(|e| file_err(&log_csv, e))?;
            }
            let outputs = TrainOutputs { log_csv: Some(log_csv), checkpoint_dir: Some(dir.join("checkpoints")) };
            let records = train_sr(&mut model, &samples, &net, weights, &train_cfg, &outputs)?;
            if let (Some(first), Some(last)) = (records.first(), records.last()) {
                log::info!("{v}: {} samples, l1 {:.4} -> {:.4}", samples.len(), first.l1, last.l1);
            }
            model.save(&ckpt)
        })?;

        let out_dir = layout.generated(v);
        let gen_hash = runner.stage(
            StageKind::Generate,
            &format!("generate:{v}"),
            &needs_train_sources,
            &[&train_hash],
            &[rel(&layout, &out_dir)],
            || {
                let split = split()?;
                let model = SrModel::load(&ckpt)?;
                let mut ids = split.test_aois.clone();
                if needs_train_sources {
                    ids.extend(split.train_aois.iter().cloned());
                }
                for id in &ids {
                    let aoi = load_aoi(&layout, cfg, id)?;
                    write_frames(out_dir.join(id), &generate_series(&model, &aoi, model.config.patch)?)?;
                }
                Ok(())
            },
        )?;
        gen_hashes.insert(v.clone(), gen_hash);
    }

    let source_hash = |s: &str| -> String {
        match gen_hashes.get(s) {
            Some(h) => h.clone(),
            None => match cfg.evaluation.external.get(s) {
                Some(p) => sha256_hex(p.to_string_lossy().as_bytes()),
                None => s.to_string(),
            },
        }
    };

    // Trackers, tracking and evaluation, per setting and source.
    let tcfg = cfg.tracker_config()?;
    let train_cfg = TrainConfig { seed: cfg.seed, ..cfg.tracker.train.clone() };
    let mut eval_hashes: Vec<String> = Vec::new();
    for &setting in &cfg.tracker.settings {
        let mut tracker_hashes: BTreeMap<String, String> = BTreeMap::new();
        for src in setting_sources(cfg, setting) {
            let ckpt = layout.tracker_checkpoint(setting, &src);
            let name = if setting == 1 { "train-tracker:s1".to_string() } else { format!("train-tracker:s2:{src}") };
            let key = (&tcfg, &train_cfg, cfg.dataset.occlusion_threshold);
            let dep = source_hash(&src);
            let h = runner.stage(
                StageKind::TrainTracker,
                &name,
                &key,
                &[&split_hash, &dep],
                &[rel(&layout, ckpt.parent().expect("has parent"))],
                || {
                    let split = split()?;
                    let mut frames = Vec::new();
                    for id in &split.train_aois {
                        let aoi = load_aoi(&layout, cfg, id)?;
                        let labels = aoi.labels.clone().ok_or_else(|| Error::Invalid(format!("AOI `{id}` has no labels")))?;
                        frames.extend(labeled_frames(&source_series(cfg, &layout, &src, &aoi)?, &labels));
                    }
                    let mut model = TrackerModel::init(tcfg.clone(), cfg.seed)?;
                    let dir = ckpt.parent().expect("has parent");
                    let log_csv = dir.join("loss.csv");
                    if log_csv.exists() {
                        std::fs::remove_file(&log_csv).map_err(|e| file_err(&log_csv, e))?;
                    }
                    let outputs = TrainOutputs { log_csv: Some(log_csv), checkpoint_dir: None };
                    train_tracker(&mut model, &frames, &train_cfg, &outputs)?;
                    model.save(&ckpt)
                },
            )?;
            tracker_hashes.insert(src, h);
        }

        for src in &cfg.evaluation.sources {
            let tracker_key = if setting == 1 { "hr" } else { src.as_str() };
            let ckpt = layout.tracker_checkpoint(setting, tracker_key);
            let tracks_dir = layout.tracks(setting, src);
            let dep = source_hash(src);
            let track_hash = runner.stage(
                StageKind::Track,
                &format!("track:s{setting}:{src}"),
                &(),
                &[&tracker_hashes[tracker_key], &dep, &split_hash],
                &[rel(&layout, &tracks_dir)],
                || {
                    let split = split()?;
                    let model = TrackerModel::load(&ckpt)?;
                    std::fs::create_dir_all(&tracks_dir).map_err(|e| file_err(&tracks_dir, e))?;
                    for id in &split.test_aois {
                        let aoi = load_aoi(&layout, cfg, id)?;
                        let series = match source_series(cfg, &layout, src, &aoi) {
                            Ok(s) => s,
                            Err(e) => {
                                log::warn!("source `{src}` unavailable for AOI `{id}`: {e}");
                                continue;
                            }
                        };
                        model.track(&series)?.save(tracks_dir.join(format!("{id}.geojson")))?;
                    }
                    Ok(())
                },
            )?;

            let report_path = layout.source_report(setting, src);
            let metadata_key = (&cfg.preset, cfg.seed);
            let eval_hash = runner.stage(
                StageKind::Evaluate,
                &format!("evaluate:s{setting}:{src}"),
                &metadata_key,
                &[&track_hash, &data_hash],
                &[rel(&layout, &report_path)],
                || {
                    let mut metadata = BTreeMap::new();
                    metadata.insert("setting".to_string(), setting.to_string());
                    metadata.insert("source".to_string(), src.clone());
                    metadata.insert("preset".to_string(), cfg.preset.clone());
                    metadata.insert("seed".to_string(), cfg.seed.to_string());
                    metadata.insert("tracker_checkpoint".to_string(), rel(&layout, &ckpt).to_string_lossy().into_owned());
                    if cfg.is_generated(src) {
                        let sr = rel(&layout, &layout.sr_checkpoint(src));
                        metadata.insert("sr_checkpoint".to_string(), sr.to_string_lossy().into_owned());
                    }
                    let report = evaluate_run(&tracks_dir, &layout.data_root, metadata)?;
                    if let Some(dir) = report_path.parent() {
                        std::fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
                    }
                    report.save(&report_path)
                },
            );
            match eval_hash {
                Ok(h) => eval_hashes.push(h),
                Err(e) => {
                    log::warn!("{e}");
                    eval_hashes.push(format!("missing:s{setting}:{src}"));
                }
            }
        }
    }

    // Comparison.
    let deps: Vec<&str> = eval_hashes.iter().map(String::as_str).collect();
    runner.stage(
        StageKind::Compare,
        "compare",
        &(&cfg.preset, cfg.seed, &cfg.evaluation.sources),
        &deps,
        &[PathBuf::from("report.json"), PathBuf::from("table.txt"), PathBuf::from("figures")],
        || {
            let report = compare_sources(cfg, &layout)?;
            save_json(&layout.report(), &report)?;
            let table = report.table();
            std::fs::write(run_dir.join("table.txt"), &table).map_err(|e| file_err(run_dir, e))?;
            log::info!("\n{table}");
            write_figures(cfg, &layout)
        },
    )?;
    Ok(runner.summary)
}

/// Gather the per-source reports of every setting and check the ordering
/// TS(hr) ≥ TS(generated) ≥ TS(lr). Missing sources are listed and the
/// others proceed.
pub fn compare_sources(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<ComparisonReport> {
    let mut settings = Vec::new();
    for &setting in &cfg.tracker.settings {
        let mut reports = BTreeMap::new();
        let mut missing = Vec::new();
        for src in &cfg.evaluation.sources {
            match MetricsReport::load(layout.source_report(setting, src)) {
                Ok(r) => {
                    reports.insert(src.clone(), r);
                }
                Err(_) => missing.push(src.clone()),
            }
        }
        let mut ordering = BTreeMap::new();
        if let (Some(hr), Some(lr)) = (reports.get("hr"), reports.get("lr")) {
            for v in cfg.sr.variants.iter().filter(|v| reports.contains_key(*v)) {
                ordering.insert(v.clone(), OrderingCheck::new(hr.ts, reports[v].ts, lr.ts));
            }
        }
        settings.push(SettingComparison { setting, reports, missing, ordering });
    }
    Ok(ComparisonReport { preset: cfg.preset.clone(), seed: cfg.seed, settings })
}

/// Draw footprint outlines onto a storage-space frame: `gt` in green, `pred`
/// in red.
pub fn overlay(frame: &RasterImage, gt: &ndarray::Array2<bool>, pred: &ndarray::Array2<bool>) -> Result<RasterImage> {
    let (_, h, w) = frame.dims();
    let rgb = |r: usize, c: usize| -> [f64; 3] {
        let px = frame.pixels();
        if frame.bands() >= 3 {
            [px[[0, r, c]], px[[1, r, c]], px[[2, r, c]]]
        } else {
            [px[[0, r, c]]; 3]
        }
    };
    let edge = |m: &ndarray::Array2<bool>, r: usize, c: usize| {
        m[[r, c]]
            && (r == 0 || c == 0 || r + 1 == h || c + 1 == w || !m[[r - 1, c]] || !m[[r + 1, c]] || !m[[r, c - 1]] || !m[[r, c + 1]])
    };
    let out = Array3::from_shape_fn((3, h, w), |(b, r, c)| {
        if edge(pred, r, c) {
            [1.0, 0.1, 0.1][b]
        } else if edge(gt, r, c) {
            [0.1, 1.0, 0.1][b]
        } else {
            rgb(r, c)[b]
        }
    });
    RasterImage::new(out, frame.timestamp(), frame.aoi_id(), frame.gsd())
}

/// One side-by-side panel per setting and test AOI: the last frame of each
/// source with ground truth and predicted footprints outlined.
pub fn write_figures(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<()> {
    let split: AoiSplit = load_json(&layout.split())?;
    let fig_dir = layout.run_dir.join("figures");
    std::fs::create_dir_all(&fig_dir).map_err(|e| file_err(&fig_dir, e))?;
    for &setting in &cfg.tracker.settings {
        for id in &split.test_aois {
            let aoi = load_aoi(layout, cfg, id)?;
            let Some(labels) = aoi.labels.clone() else { continue };
            let last = aoi.hr.len().saturating_sub(1);
            let mut panels = Vec::new();
            for src in &cfg.evaluation.sources {
                let (Ok(series), Ok(pred)) = (
                    source_series(cfg, layout, src, &aoi),
                    FootprintSet::load(layout.tracks(setting, src).join(format!("{id}.geojson"))),
                ) else {
                    continue;
                };
                let Some(frame) = series.frames().last() else { continue };
                let (h, w) = (frame.height(), frame.width());
                panels.push(overlay(frame, &labels.mask_at(last, h, w), &pred.mask_at(last, h, w))?);
            }
            if panels.is_empty() {
                continue;
            }
            let gap = 2;
            let (h, w) = (panels[0].height(), panels[0].width());
            let total_w = panels.len() * w + (panels.len() - 1) * gap;
            let mut canvas = Array3::from_elem((3, h, total_w), 1.0);
            for (i, p) in panels.iter().enumerate() {
                canvas.slice_mut(ndarray::s![.., .., i * (w + gap)..i * (w + gap) + w]).assign(p.pixels());
            }
            let img = RasterImage::new(canvas, 0, id.as_str(), 1.0)?;
            save_png(&img, fig_dir.join(format!("s{setting}_{id}.png")))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_resolve_to_weights() {
        let base = LossWeights::default();
        assert_eq!(resolve_variant("ead", base).unwrap(), (Variant::Ead, LossWeights { lambda1: 100.0, lambda2: 0.0 }));
        assert_eq!(resolve_variant("ead-lpips", base).unwrap(), (Variant::Ead, LossWeights { lambda1: 100.0, lambda2: 10.0 }));
        assert_eq!(resolve_variant("pix2pix", base).unwrap().0, Variant::Pix2pix);
        assert!(matches!(resolve_variant("srgan", base), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml("seed = 7\n[sr]\nvariants = [\"ead\"]\n[evaluation]\nsources = [\"hr\", \"ead\"]\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.dataset.train_aois, 10);
        partial.validate().unwrap();
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());

        let partial = ExperimentConfig::from_toml("[sr.train]\nmax_steps = 9\n[tracker.train]\nbatch_size = 2\n").unwrap();
        assert_eq!(partial.sr.train, TrainConfig { max_steps: 9, ..TrainConfig::sr_default() });
        assert_eq!(partial.tracker.train, TrainConfig { batch_size: 2, ..TrainConfig::tracker_default() });
        assert!(ExperimentConfig::from_toml("[sr.train]\nsteps = 9\n").is_err());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = ExperimentConfig::default();
        cfg.sr.variants = vec!["ead-gan".into()];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.evaluation.sources.push("dbpn".into());
        assert!(cfg.validate().is_err());
        cfg.evaluation.external.insert("dbpn".into(), "/nowhere".into());
        cfg.validate().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.tracker.settings = vec![3];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.scene.hr_size = 48;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ordering_flags() {
        let o = OrderingCheck::new(0.8, 0.6, 0.1);
        assert!(o.holds && o.generated_above_lr && o.hr_at_least_generated);
        let tie = OrderingCheck::new(0.5, 0.5, 0.5);
        assert!(tie.holds && !tie.generated_above_lr);
        assert!(!OrderingCheck::new(0.4, 0.6, 0.1).holds);
    }

    #[test]
    fn overlay_marks_outlines() {
        let frame = RasterImage::constant(3, 6, 6, 0.5).unwrap();
        let mut gt = ndarray::Array2::from_elem((6, 6), false);
        gt.slice_mut(ndarray::s![1..5, 1..5]).fill(true);
        let none = ndarray::Array2::from_elem((6, 6), false);
        let img = overlay(&frame, &gt, &none).unwrap();
        assert_eq!(img.pixels()[[1, 1, 1]], 1.0);
        assert_eq!(img.pixels()[[1, 2, 2]], 0.5);
        assert_eq!(img.pixels()[[0, 0, 0]], 0.5);
    }
}
