//! Training objective for the super-resolution model (L1, perceptual and
//! adversarial terms), the alternating discriminator/generator loop, and
//! tracker fine-tuning.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hrtrack_nn::{Adam, AdamConfig, Conv2dSpec, Graph, Gradients, Optimizer, ParamStore, Sgd, SgdConfig, Tensor, Var};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PairedSample;
use crate::error::{dim_err, file_err, Error, Result};
use crate::nets::{add_conv, Params, LEAK};
use crate::raster::{PixelSpace, RasterImage};
use crate::sr::{build_discriminator, build_generator, SrBatch, SrModel};
use crate::tracker::{mask_to_raster, preprocess_frame, TrackerModel};

/// Floor applied to probabilities before taking logarithms.
pub const CGAN_EPS: f64 = 1e-7;
const LPIPS_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 100.0, lambda2: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!("loss weights must be ≥ 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Which player a cGAN loss is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Generator,
    Discriminator,
}

fn check_same(op: &'static str, a: &RasterImage, b: &RasterImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(dim_err(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean absolute difference over all entries.
pub fn loss_l1(pred: &RasterImage, target: &RasterImage) -> Result<f64> {
    check_same("loss_l1", pred, target)?;
    let n = pred.pixels().len() as f64;
    Ok(pred.pixels().iter().zip(target.pixels().iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// `−mean log D(real) − mean log(1 − D(fake))` for the discriminator,
/// `−mean log D(fake)` for the generator, with scores floored at
/// [`CGAN_EPS`] inside the logarithms.
pub fn loss_cgan(d_real: &[f64], d_fake: &[f64], side: Side) -> f64 {
    let mean_log = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&d| f(d).max(CGAN_EPS).ln()).sum::<f64>() / v.len() as f64;
    match side {
        Side::Generator => -mean_log(d_fake, &|d| d),
        Side::Discriminator => -(mean_log(d_real, &|d| d) + mean_log(d_fake, &|d| 1.0 - d)),
    }
}

/// Fixed convolutional feature extractor for the perceptual loss. Each tap
/// contributes the spatial mean of the weighted squared difference of
/// channel-normalized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LpipsNet {
    pub bands: usize,
    pub widths: Vec<usize>,
    pub params: ParamStore,
}

impl LpipsNet {
    /// Seeded random weights with unit channel weights: a 3×3 layer at full
    /// resolution followed by stride-2 4×4 layers, one tap after each.
    pub fn seeded(bands: usize, seed: u64) -> Self {
        let widths = vec![8, 16, 32];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut cin = bands;
        for (i, &w) in widths.iter().enumerate() {
            add_conv(&mut params, &format!("lpips.c{i}"), cin, w, if i == 0 { 3 } else { 4 }, &mut rng);
            params.insert(format!("lpips.lin{i}"), Tensor::full(&[w], 1.0));
            cin = w;
        }
        Self { bands, widths, params }
    }

    /// Replace weights from a checkpoint holding the same parameter names
    /// (for instance converted published perceptual weights).
    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (_, store) = ParamStore::load(path).map_err(|e| file_err(path, e))?;
        for (name, t) in self.params.iter_mut() {
            let src = store.get(name).ok_or_else(|| file_err(path, format!("missing `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(file_err(path, format!("`{name}` has shape {:?}", src.shape())));
            }
            *t = src.clone();
        }
        Ok(())
    }

    fn taps(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let p = Params::new(&self.params, false);
        let mut h = x;
        let mut out = Vec::with_capacity(self.widths.len());
        for i in 0..self.widths.len() {
            let spec = if i == 0 { Conv2dSpec::new(1, 1) } else { Conv2dSpec::new(2, 1) };
            let c = p.conv(g, &format!("lpips.c{i}"), h, spec)?;
            h = g.leaky_relu(c, LEAK);
            out.push(h);
        }
        Ok(out)
    }

    /// Batch-mean perceptual distance between `[n, C, H, W]` tensors.
    pub(crate) fn build(&self, g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
        let fp = self.taps(g, pred)?;
        let ft = self.taps(g, target)?;
        let p = Params::new(&self.params, false);
        let mut total: Option<Var> = None;
        for (i, (a, b)) in fp.into_iter().zip(ft).enumerate() {
            let na = g.channel_unit_norm(a, LPIPS_EPS)?;
            let nb = g.channel_unit_norm(b, LPIPS_EPS)?;
            let d = g.sub(na, nb)?;
            let sq = g.square(d);
            let lin = p.var(g, &format!("lpips.lin{i}"))?;
            let weighted = g.channel_scale(sq, lin)?;
            // Mean over (n, c, h, w) times c: channel sum, spatial and batch mean.
            let m = g.mean(weighted);
            let term = g.scale(m, self.widths[i] as f64);
            total = Some(match total {
                None => term,
                Some(t) => g.add(t, term)?,
            });
        }
        Ok(total.expect("at least one tap"))
    }
}

pub fn loss_lpips(pred: &RasterImage, target: &RasterImage, net: &LpipsNet) -> Result<f64> {
    check_same("loss_lpips", pred, target)?;
    let mut g = Graph::new();
    let a = g.constant(pred.to_tensor());
    let b = g.constant(target.to_tensor());
    let l = net.build(&mut g, a, b)?;
    Ok(g.scalar(l))
}

/// Generator objective from images and discriminator scores on the fake.
pub fn total_generator_loss(
    pred: &RasterImage,
    target: &RasterImage,
    d_fake: &[f64],
    weights: LossWeights,
    net: &LpipsNet,
) -> Result<f64> {
    let l1 = loss_l1(pred, target)?;
    let lp = loss_lpips(pred, target, net)?;
    Ok(loss_cgan(&[], d_fake, Side::Generator) + weights.lambda1 * l1 + weights.lambda2 * lp)
}

/// Graph form of [`total_generator_loss`] for a prediction node; returns
/// `(total, l1, lpips, cgan_g)`.
pub(crate) fn build_generator_loss(
    g: &mut Graph,
    pred: Var,
    target: Var,
    d_fake: Var,
    weights: LossWeights,
    net: &LpipsNet,
) -> Result<(Var, Var, Var, Var)> {
    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff);
    let l1 = g.mean(abs);
    let lp = net.build(g, pred, target)?;
    let logd = g.log_clamped(d_fake, CGAN_EPS);
    let m = g.mean(logd);
    let cg = g.scale(m, -1.0);
    let a = g.scale(l1, weights.lambda1);
    let b = g.scale(lp, weights.lambda2);
    let ab = g.add(a, b)?;
    let total = g.add(cg, ab)?;
    Ok((total, l1, lp, cg))
}

pub(crate) fn build_discriminator_loss(g: &mut Graph, d_real: Var, d_fake: Var) -> Result<Var> {
    let lr = g.log_clamped(d_real, CGAN_EPS);
    let mr = g.mean(lr);
    let inv = g.affine(d_fake, -1.0, 1.0);
    let lf = g.log_clamped(inv, CGAN_EPS);
    let mf = g.mean(lf);
    let s = g.add(mr, mf)?;
    Ok(g.scale(s, -1.0))
}

/// Optimizer family and hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimSpec {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Sgd { lr: f64, momentum: f64 },
}

impl OptimSpec {
    pub fn adam() -> Self {
        let c = AdamConfig::default();
        OptimSpec::Adam { lr: c.lr, beta1: c.beta1, beta2: c.beta2, eps: c.eps }
    }

    pub fn sgd() -> Self {
        let c = SgdConfig::default();
        OptimSpec::Sgd { lr: c.lr, momentum: c.momentum }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimSpec::Adam { lr, .. } | OptimSpec::Sgd { lr, .. } => lr,
        }
    }

    fn build(&self) -> Box<dyn Optimizer> {
        match *self {
            OptimSpec::Adam { lr, beta1, beta2, eps } => Box::new(Adam::new(AdamConfig { lr, beta1, beta2, eps })),
            OptimSpec::Sgd { lr, momentum } => Box::new(Sgd::new(SgdConfig { lr, momentum })),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimSpec,
    /// Discriminator optimizer; unused by tracker training.
    pub disc_optimizer: OptimSpec,
    pub batch_size: usize,
    pub max_steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
}

/// A training table with every key optional.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialTrainConfig {
    optimizer: Option<OptimSpec>,
    disc_optimizer: Option<OptimSpec>,
    batch_size: Option<usize>,
    max_steps: Option<usize>,
    seed: Option<u64>,
    checkpoint_every: Option<usize>,
}

impl TrainConfig {
    /// Deserialize a possibly partial table, taking missing keys from `base`.
    pub fn deserialize_over<'de, D: serde::Deserializer<'de>>(d: D, base: Self) -> std::result::Result<Self, D::Error> {
        let p = PartialTrainConfig::deserialize(d)?;
        Ok(Self {
            optimizer: p.optimizer.unwrap_or(base.optimizer),
            disc_optimizer: p.disc_optimizer.unwrap_or(base.disc_optimizer),
            batch_size: p.batch_size.unwrap_or(base.batch_size),
            max_steps: p.max_steps.unwrap_or(base.max_steps),
            seed: p.seed.unwrap_or(base.seed),
            checkpoint_every: p.checkpoint_every.unwrap_or(base.checkpoint_every),
        })
    }

    pub fn sr_default() -> Self {
        Self {
            optimizer: OptimSpec::adam(),
            disc_optimizer: OptimSpec::adam(),
            batch_size: 4,
            max_steps: 400,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn tracker_default() -> Self {
        Self {
            optimizer: OptimSpec::sgd(),
            disc_optimizer: OptimSpec::sgd(),
            batch_size: 8,
            max_steps: 600,
            seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.optimizer.lr() <= 0.0 || self.disc_optimizer.lr() <= 0.0 {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        Ok(())
    }
}

/// Loss components of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l1: f64,
    pub lpips: f64,
    pub cgan_g: f64,
    pub cgan_d: f64,
    /// Generator objective `cgan_g + λ1·l1 + λ2·lpips`.
    pub total: f64,
    pub wall_time: f64,
}

/// Where training writes its log and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub log_csv: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

fn open_log(path: &Path, header: &str) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
    }
    let fresh = !path.exists();
    let f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| file_err(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    if fresh {
        w.write_record(header.split(','))
            .map_err(|e| file_err(path, e))?;
    }
    Ok(w)
}

fn finite_or(component: &'static str, step: usize, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { component, step })
    }
}

fn check_grads(component: &'static str, step: usize, grads: &Gradients) -> Result<()> {
    if grads.params().values().all(Tensor::all_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite { component, step })
    }
}

/// Seeded minibatch order: reshuffled each epoch.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = Self { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..n).collect(), cursor: n, batch: batch.min(n) };
        s.reshuffle_if_needed();
        s
    }

    fn reshuffle_if_needed(&mut self) {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
    }

    fn next(&mut self) -> Vec<usize> {
        self.reshuffle_if_needed();
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

/// Values of every term of the generator objective, plus the
/// discriminator loss, on one batch with the current parameters.
pub fn evaluate_objective(model: &SrModel, batch: &SrBatch, weights: LossWeights, net: &LpipsNet) -> Result<LossRecord> {
    let target = batch.target.clone().ok_or_else(|| Error::Invalid("batch has no HR targets".into()))?;
    let mut g = Graph::new();
    let cat = g.constant(batch.cat.clone());
    let fake = build_generator(&mut g, &model.config, Params::new(&model.gen, false), cat, &batch.grid, &batch.times)?;
    let cond = g.constant(batch.condition());
    let real = g.constant(target);
    let d_fake = build_discriminator(&mut g, &model.config, Params::new(&model.disc, false), fake, cond)?;
    let d_real = build_discriminator(&mut g, &model.config, Params::new(&model.disc, false), real, cond)?;
    let (total, l1, lp, cg) = build_generator_loss(&mut g, fake, real, d_fake, weights, net)?;
    let d_loss = build_discriminator_loss(&mut g, d_real, d_fake)?;
    Ok(LossRecord {
        step: 0,
        l1: g.scalar(l1),
        lpips: g.scalar(lp),
        cgan_g: g.scalar(cg),
        cgan_d: g.scalar(d_loss),
        total: g.scalar(total),
        wall_time: 0.0,
    })
}

/// Generator objective and its parameter gradients on one batch, with the
/// discriminator frozen.
pub fn generator_gradients(
    model: &SrModel,
    batch: &SrBatch,
    weights: LossWeights,
    net: &LpipsNet,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let target = batch.target.clone().ok_or_else(|| Error::Invalid("batch has no HR targets".into()))?;
    let mut g = Graph::new();
    let cat = g.constant(batch.cat.clone());
    let fake = build_generator(&mut g, &model.config, Params::new(&model.gen, true), cat, &batch.grid, &batch.times)?;
    let cond = g.constant(batch.condition());
    let d_fake = build_discriminator(&mut g, &model.config, Params::new(&model.disc, false), fake, cond)?;
    let real = g.constant(target);
    let (total, ..) = build_generator_loss(&mut g, fake, real, d_fake, weights, net)?;
    let grads = g.backward(total)?;
    Ok((g.scalar(total), grads.into_params()))
}

/// One discriminator update on `batch` against the generator's current
/// output; returns the pre-update discriminator loss.
pub fn discriminator_step(model: &mut SrModel, batch: &SrBatch, fake: &Tensor, opt: &mut dyn Optimizer, step: usize) -> Result<f64> {
    let target = batch.target.clone().ok_or_else(|| Error::Invalid("batch has no HR targets".into()))?;
    let mut g = Graph::new();
    let cond = g.constant(batch.condition());
    let real = g.constant(target);
    let fake = g.constant(fake.clone());
    let p = Params::new(&model.disc, true);
    let d_real = build_discriminator(&mut g, &model.config, p, real, cond)?;
    let d_fake = build_discriminator(&mut g, &model.config, p, fake, cond)?;
    let loss = build_discriminator_loss(&mut g, d_real, d_fake)?;
    let value = finite_or("cgan_d", step, g.scalar(loss))?;
    let grads = g.backward(loss)?;
    check_grads("cgan_d", step, &grads)?;
    opt.step(&mut model.disc, grads.params());
    Ok(value)
}

fn batch_origin(rng: &mut ChaCha8Rng, frame: (usize, usize), patch: usize) -> Result<(usize, usize)> {
    if frame.0 < patch || frame.1 < patch {
        return Err(dim_err("train_sr", format!("frame {frame:?} smaller than patch {patch}")));
    }
    let r = if frame.0 == patch { 0 } else { rng.random_range(0..=frame.0 - patch) };
    let c = if frame.1 == patch { 0 } else { rng.random_range(0..=frame.1 - patch) };
    Ok((r, c))
}

/// Alternate one discriminator step and one generator step per minibatch
/// for `cfg.max_steps` steps. Frames larger than the model patch are
/// randomly cropped. Every step is logged; a non-finite loss aborts with
/// the offending component.
pub fn train_sr(
    model: &mut SrModel,
    samples: &[PairedSample],
    net: &LpipsNet,
    weights: LossWeights,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    weights.validate()?;
    if samples.is_empty() {
        return Err(Error::Invalid("train_sr needs at least one sample".into()));
    }
    if samples.iter().any(|s| s.hr_target.is_none()) {
        return Err(Error::Invalid("train_sr needs samples with HR targets".into()));
    }
    let mut sampler = BatchSampler::new(samples.len(), cfg.batch_size, cfg.seed);
    let mut crop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de);
    let mut gen_opt = cfg.optimizer.build();
    let mut disc_opt = cfg.disc_optimizer.build();
    let mut log = match &outputs.log_csv {
        Some(p) => Some((open_log(p, "step,l1,lpips,cgan_g,cgan_d,total,wall_time")?, p.clone())),
        None => None,
    };
    let start = Instant::now();
    let patch = model.config.patch;
    let mut records = Vec::with_capacity(cfg.max_steps);
    for step in 1..=cfg.max_steps {
        let idx = sampler.next();
        let chosen: Vec<&PairedSample> = idx.iter().map(|&i| &samples[i]).collect();
        let frame = (chosen[0].hr_reference.height(), chosen[0].hr_reference.width());
        let origin = batch_origin(&mut crop_rng, frame, patch)?;
        let batch = SrBatch::from_samples(&chosen, origin, patch)?;
        let target = batch.target.clone().expect("checked above");

        // Generator forward once; its value feeds the discriminator step.
        let mut g = Graph::new();
        let cat = g.constant(batch.cat.clone());
        let fake = build_generator(&mut g, &model.config, Params::new(&model.gen, true), cat, &batch.grid, &batch.times)?;
        let fake_value = g.value(fake).clone();
        let cgan_d = discriminator_step(model, &batch, &fake_value, disc_opt.as_mut(), step)?;

        let cond = g.constant(batch.condition());
        let d_fake = build_discriminator(&mut g, &model.config, Params::new(&model.disc, false), fake, cond)?;
        let real = g.constant(target);
        let (total, l1, lp, cg) = build_generator_loss(&mut g, fake, real, d_fake, weights, net)?;
        let l1 = finite_or("l1", step, g.scalar(l1))?;
        let lp = finite_or("lpips", step, g.scalar(lp))?;
        let cg = finite_or("cgan_g", step, g.scalar(cg))?;
        let total_v = finite_or("total", step, g.scalar(total))?;
        let grads = g.backward(total)?;
        check_grads("total", step, &grads)?;
        gen_opt.step(&mut model.gen, grads.params());

        let rec = LossRecord { step, l1, lpips: lp, cgan_g: cg, cgan_d, total: total_v, wall_time: start.elapsed().as_secs_f64() };
        if let Some((w, path)) = log.as_mut() {
            w.serialize((rec.step, rec.l1, rec.lpips, rec.cgan_g, rec.cgan_d, rec.total, rec.wall_time))
                .map_err(|e| file_err(&*path, e))?;
            w.flush().map_err(|e| file_err(&*path, e))?;
        }
        log::debug!("sr step {step}: l1 {l1:.5} lpips {lp:.5} cgan_g {cg:.4} cgan_d {cgan_d:.4}");
        records.push(rec);
        if let Some(dir) = &outputs.checkpoint_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                std::fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
                model.save(dir.join(format!("sr_step{step:06}.ckpt")))?;
            }
        }
    }
    Ok(records)
}

/// One tracker training example: a frame and its building mask.
#[derive(Clone, Debug)]
pub struct LabeledFrame {
    pub image: RasterImage,
    pub mask: Array2<bool>,
}

/// Per-step tracker loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerLossRecord {
    pub step: usize,
    pub bce: f64,
    pub wall_time: f64,
}

/// Preprocess labeled frames into model-space patches `[n, C, P, P]` and
/// soft targets `[n, 1, P, P]` (the mask enlarged the same way as the image).
pub fn tracker_patches(model: &TrackerModel, frames: &[LabeledFrame]) -> Result<(Tensor, Tensor)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for f in frames {
        if f.mask.dim() != (f.image.height(), f.image.width()) {
            return Err(dim_err("tracker_patches", "mask and image sizes differ"));
        }
        let img = match f.image.space() {
            PixelSpace::Model => f.image.from_model_space()?,
            PixelSpace::Storage => f.image.clone(),
        };
        let set = preprocess_frame(&img, &model.config)?;
        let mset = preprocess_frame(&mask_to_raster(&f.mask)?, &model.config)?;
        xs.push(model.patch_tensor(&set.patches)?);
        for m in &mset.patches {
            ys.push(m.to_tensor());
        }
    }
    Ok((Tensor::stack_batch(&xs)?, Tensor::stack_batch(&ys)?))
}

/// Minimize pixelwise binary cross-entropy on enlarged patches with the
/// configured optimizer.
pub fn train_tracker(
    model: &mut TrackerModel,
    frames: &[LabeledFrame],
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<Vec<TrackerLossRecord>> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::Invalid("train_tracker needs at least one labeled frame".into()));
    }
    let (x, y) = tracker_patches(model, frames)?;
    let n = x.shape()[0];
    let mut sampler = BatchSampler::new(n, cfg.batch_size, cfg.seed);
    let mut opt = cfg.optimizer.build();
    let mut log = match &outputs.log_csv {
        Some(p) => Some((open_log(p, "step,bce,wall_time")?, p.clone())),
        None => None,
    };
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.max_steps);
    for step in 1..=cfg.max_steps {
        let idx = sampler.next();
        let xb = Tensor::stack_batch(&idx.iter().map(|&i| x.batch_slice(i, 1)).collect::<std::result::Result<Vec<_>, _>>()?)?;
        let yb = Tensor::stack_batch(&idx.iter().map(|&i| y.batch_slice(i, 1)).collect::<std::result::Result<Vec<_>, _>>()?)?;
        let mut g = Graph::new();
        let xv = g.constant(xb);
        let logits = model.build_logits(&mut g, xv, true)?;
        let loss = g.bce_with_logits(logits, &yb, model.config.pos_weight)?;
        let bce = finite_or("bce", step, g.scalar(loss))?;
        let grads = g.backward(loss)?;
        check_grads("bce", step, &grads)?;
        opt.step(&mut model.params, grads.params());
        let rec = TrackerLossRecord { step, bce, wall_time: start.elapsed().as_secs_f64() };
        if let Some((w, path)) = log.as_mut() {
            w.serialize((rec.step, rec.bce, rec.wall_time)).map_err(|e| file_err(&*path, e))?;
            w.flush().map_err(|e| file_err(&*path, e))?;
        }
        records.push(rec);
        if let Some(dir) = &outputs.checkpoint_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                std::fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
                model.save(dir.join(format!("tracker_step{step:06}.ckpt")))?;
            }
        }
    }
    Ok(records)
}

/// Fraction-of-pixels IoU of `sigmoid(logits) > 0.5` against targets > 0.5,
/// over a batch of tracker patches.
pub fn tracker_patch_iou(model: &TrackerModel, x: &Tensor, y: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let logits = model.build_logits(&mut g, xv, false)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&z, &t) in g.value(logits).data().iter().zip(y.data()) {
        let (p, t) = (z > 0.0, t > 0.5);
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use ndarray::Array3;

    use crate::sr::GeneratorConfig;
    use crate::tracker::TrackerConfig;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RasterImage::new(Array3::from_shape_fn((c, h, w), |_| rng.random_range(0.0..1.0)), 0, "a", 4.0).unwrap()
    }

    fn model_image(c: usize, h: usize, w: usize, seed: u64) -> RasterImage {
        random_image(c, h, w, seed).to_model_space().unwrap()
    }

    fn training_sample(seed: u64) -> PairedSample {
        PairedSample {
            lr_target: Arc::new(random_image(3, 2, 2, seed)),
            hr_reference: Arc::new(random_image(3, 16, 16, seed + 1)),
            hr_target: Some(Arc::new(random_image(3, 16, 16, seed + 2))),
            t_index: 1,
            t_ref_index: 0,
            time: 0.5,
        }
    }

    fn short_run(steps: usize) -> TrainConfig {
        TrainConfig { batch_size: 2, max_steps: steps, seed: 9, ..TrainConfig::sr_default() }
    }

    #[test]
    fn l1_examples() {
        let a = model_image(3, 4, 4, 1);
        assert_eq!(loss_l1(&a, &a).unwrap(), 0.0);
        let lo = RasterImage::constant(3, 4, 4, -1.0).unwrap();
        let hi = RasterImage::constant(3, 4, 4, 1.0).unwrap();
        assert_eq!(loss_l1(&lo, &hi).unwrap(), 2.0);
        let mut px = a.pixels().clone();
        let mut brute = 0.0;
        for (i, v) in px.iter_mut().enumerate() {
            if i % 2 == 0 {
                *v += 0.5;
                brute += 0.5;
            }
        }
        let shifted = a.with_pixels(px).unwrap();
        let expected = brute / a.pixels().len() as f64;
        assert!((loss_l1(&shifted, &a).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.25).abs() < 1e-12);
        assert!(loss_l1(&a, &model_image(3, 4, 8, 1)).is_err());
    }

    #[test]
    fn lpips_identity_sign_and_blend() {
        let net = LpipsNet::seeded(3, 0);
        let target = model_image(3, 16, 16, 2);
        let other = model_image(3, 16, 16, 3);
        assert!(loss_lpips(&target, &target, &net).unwrap() <= 1e-8);
        for s in 4..10 {
            assert!(loss_lpips(&model_image(3, 16, 16, s), &target, &net).unwrap() >= 0.0);
        }
        let blend = |a: f64| target.with_pixels(other.pixels() * a + target.pixels() * (1.0 - a)).unwrap();
        let l: Vec<f64> = [0.0, 0.5, 1.0].iter().map(|&a| loss_lpips(&blend(a), &target, &net).unwrap()).collect();
        assert!(l[0] <= 1e-8 && l[1] > l[0] && l[2] >= l[1], "{l:?}");
        assert!(loss_lpips(&target, &model_image(3, 8, 8, 1), &net).is_err());
    }

    #[test]
    fn cgan_closed_forms() {
        let half = [0.5; 6];
        assert!((loss_cgan(&half, &half, Side::Discriminator) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((loss_cgan(&[], &half, Side::Generator) - 2f64.ln()).abs() < 1e-12);
        let perfect = loss_cgan(&[1.0 - 1e-9; 4], &[1e-9; 4], Side::Discriminator);
        assert!((0.0..1e-6).contains(&perfect));
        assert!(loss_cgan(&[0.0], &[1.0], Side::Discriminator).is_finite());
        assert!(loss_cgan(&[], &[0.0], Side::Generator).is_finite());
    }

    #[test]
    fn total_loss_composition() {
        let net = LpipsNet::seeded(3, 0);
        let t = model_image(3, 16, 16, 4);
        let p = model_image(3, 16, 16, 5);
        let d = [0.5; 4];
        let w = LossWeights::default();
        assert!((total_generator_loss(&t, &t, &d, w, &net).unwrap() - 2f64.ln()).abs() < 1e-8);
        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0 };
        let d2 = [0.3, 0.9, 0.6];
        assert_eq!(total_generator_loss(&p, &t, &d2, zero, &net).unwrap(), loss_cgan(&[], &d2, Side::Generator));
        let base = total_generator_loss(&p, &t, &d2, w, &net).unwrap();
        let doubled = total_generator_loss(&p, &t, &d2, LossWeights { lambda1: 2.0 * w.lambda1, ..w }, &net).unwrap();
        let l1 = loss_l1(&p, &t).unwrap();
        assert!((doubled - base - w.lambda1 * l1).abs() < 1e-9);
        // Affine in (l1, lpips): two weight settings recover the components.
        let lp = loss_lpips(&p, &t, &net).unwrap();
        let other = total_generator_loss(&p, &t, &d2, LossWeights { lambda1: 3.0, lambda2: 0.5 }, &net).unwrap();
        assert!((other - (loss_cgan(&[], &d2, Side::Generator) + 3.0 * l1 + 0.5 * lp)).abs() < 1e-9);
        assert!(LossWeights { lambda1: -1.0, lambda2: 0.0 }.validate().is_err());
    }

    #[test]
    fn graph_loss_matches_value_form_and_finite_differences() {
        let net = LpipsNet::seeded(3, 1);
        let target = model_image(3, 8, 8, 6);
        let pred = model_image(3, 8, 8, 7);
        let d = Tensor::from_vec(&[1, 1, 2, 2], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let w = LossWeights::default();
        let eval = |x: &Tensor| -> (f64, Tensor) {
            let mut g = Graph::new();
            let p = g.leaf(x.clone());
            let t = g.constant(target.to_tensor());
            let dv = g.constant(d.clone());
            let (total, ..) = build_generator_loss(&mut g, p, t, dv, w, &net).unwrap();
            let v = g.scalar(total);
            let grads = g.backward(total).unwrap();
            (v, grads.get(p).unwrap().clone())
        };
        let x0 = pred.to_tensor();
        let (v0, grad) = eval(&x0);
        let direct = total_generator_loss(&pred, &target, d.data(), w, &net).unwrap();
        assert!((v0 - direct).abs() < 1e-9);
        let h = 1e-6;
        let mut ok = 0;
        let n = x0.data().len();
        for i in 0..n {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let a = grad.data()[i];
            if (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) <= 1e-3 {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.95 * n as f64, "{ok}/{n} coordinates within tolerance");
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let mut model = SrModel::init(GeneratorConfig::tiny(), 1).unwrap();
        let before = model.clone();
        let recs = train_sr(&mut model, &[training_sample(1)], &LpipsNet::seeded(3, 0), LossWeights::default(), &short_run(0), &TrainOutputs::default()).unwrap();
        assert!(recs.is_empty());
        assert_eq!(model, before);

        let mut trk = TrackerModel::init(TrackerConfig { widths: vec![4, 4], patch: 16, ..TrackerConfig::desk() }, 1).unwrap();
        let before = trk.clone();
        let frame = LabeledFrame { image: random_image(3, 16, 16, 1), mask: Array2::from_elem((16, 16), false) };
        let cfg = TrainConfig { max_steps: 0, ..TrainConfig::tracker_default() };
        train_tracker(&mut trk, &[frame], &cfg, &TrainOutputs::default()).unwrap();
        assert_eq!(trk, before);
    }

    #[test]
    fn training_is_reproducible_and_logged() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<_> = (0..3).map(|i| training_sample(10 * i)).collect();
        let net = LpipsNet::seeded(3, 0);
        let run = |log: Option<PathBuf>| {
            let mut model = SrModel::init(GeneratorConfig::tiny(), 4).unwrap();
            let out = TrainOutputs { log_csv: log, checkpoint_dir: Some(dir.path().join("ck")) };
            let cfg = TrainConfig { checkpoint_every: 5, ..short_run(10) };
            (train_sr(&mut model, &samples, &net, LossWeights::default(), &cfg, &out).unwrap(), model)
        };
        let log = dir.path().join("log.csv");
        let (a, ma) = run(Some(log.clone()));
        let (b, mb) = run(None);
        assert_eq!(a.len(), 10);
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in [(x.l1, y.l1), (x.lpips, y.lpips), (x.cgan_g, y.cgan_g), (x.cgan_d, y.cgan_d), (x.total, y.total)] {
                assert!((u - v).abs() <= 1e-5);
            }
        }
        assert_eq!(ma.gen, mb.gen);
        let text = std::fs::read_to_string(&log).unwrap();
        assert!(text.starts_with("step,l1,lpips,cgan_g,cgan_d,total,wall_time\n"));
        assert_eq!(text.lines().count(), 11);
        assert!(dir.path().join("ck/sr_step000010.ckpt").exists());
        let restored = SrModel::load(dir.path().join("ck/sr_step000010.ckpt")).unwrap();
        assert_eq!(restored.gen, ma.gen);
    }

    #[test]
    fn discriminator_step_lowers_its_loss() {
        let mut model = SrModel::init(GeneratorConfig::tiny(), 5).unwrap();
        let s = [training_sample(3), training_sample(7)];
        let batch = SrBatch::from_samples(&[&s[0], &s[1]], (0, 0), 16).unwrap();
        let net = LpipsNet::seeded(3, 0);
        let mut g = Graph::new();
        let cat = g.constant(batch.cat.clone());
        let fake = build_generator(&mut g, &model.config, Params::new(&model.gen, false), cat, &batch.grid, &batch.times).unwrap();
        let fake = g.value(fake).clone();
        let mut opt = OptimSpec::Adam { lr: 1e-3, beta1: 0.0, beta2: 0.99, eps: 1e-8 }.build();
        let pre = discriminator_step(&mut model, &batch, &fake, opt.as_mut(), 1).unwrap();
        let post = evaluate_objective(&model, &batch, LossWeights::default(), &net).unwrap().cgan_d;
        assert!(post <= pre, "{post} > {pre}");
    }

    #[test]
    fn sr_overfits_one_sample() {
        let spec = crate::dataset::SceneSpec { seed: 3, hr_size: 16, scale_factor: 8, building_size: (3, 5), ..Default::default() };
        let aoi = crate::dataset::synthesize_aoi(&spec).unwrap();
        let pairs = crate::dataset::make_training_pairs(&aoi.lr, &aoi.hr).unwrap();
        let s = [pairs[pairs.len() - 1].clone()];
        let mut model = SrModel::init(GeneratorConfig::tiny(), 6).unwrap();
        let cfg = TrainConfig { batch_size: 1, max_steps: 200, seed: 1, ..TrainConfig::sr_default() };
        let recs = train_sr(&mut model, &s, &LpipsNet::seeded(3, 0), LossWeights::default(), &cfg, &TrainOutputs::default()).unwrap();
        let first = recs[0].l1;
        let last = recs.last().unwrap().l1;
        assert!(last < 0.1 * first, "l1 {first} -> {last}");
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut model = SrModel::init(GeneratorConfig::tiny(), 1).unwrap();
        for (_, t) in model.gen.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
        }
        let err = train_sr(&mut model, &[training_sample(1)], &LpipsNet::seeded(3, 0), LossWeights::default(), &short_run(3), &TrainOutputs::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 1, .. }), "{err}");
    }

    #[test]
    fn tracker_overfits_one_frame() {
        let mut mask = Array2::from_elem((16, 16), false);
        mask.slice_mut(ndarray::s![3..9, 4..12]).fill(true);
        mask.slice_mut(ndarray::s![11..15, 2..6]).fill(true);
        let mut px = random_image(3, 16, 16, 8).pixels() * 0.3;
        for ((_, r, c), v) in px.indexed_iter_mut() {
            if mask[[r, c]] {
                *v += 0.6;
            }
        }
        let frame = LabeledFrame { image: RasterImage::new(px, 0, "a", 4.0).unwrap(), mask };
        let mut model = TrackerModel::init(TrackerConfig { widths: vec![8, 16], patch: 16, ..TrackerConfig::desk() }, 2).unwrap();
        let cfg = TrainConfig { batch_size: 9, max_steps: 300, ..TrainConfig::tracker_default() };
        let recs = train_tracker(&mut model, std::slice::from_ref(&frame), &cfg, &TrainOutputs::default()).unwrap();
        let (x, y) = tracker_patches(&model, &[frame]).unwrap();
        let iou = tracker_patch_iou(&model, &x, &y).unwrap();
        assert!(iou > 0.9, "iou {iou}");
        let ma: Vec<f64> = recs.windows(5).map(|w| w.iter().map(|r| r.bce).sum::<f64>() / 5.0).collect();
        assert!(ma.windows(2).all(|p| p[1] <= p[0] + 1e-9), "moving average increased");
    }
}
