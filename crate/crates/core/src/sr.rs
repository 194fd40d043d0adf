//! Reference-guided super-resolution generator and its conditional
//! discriminator.
//!
//! The EAD generator maps the concatenation of the upsampled LR frame and an
//! HR reference to per-pixel features `F`, encodes each pixel's `(x, y, t)`
//! as Fourier features plus a learned spatial embedding `E`, and predicts
//! every output pixel independently from `(F, E)` with a small per-pixel
//! network `G_p`. The Pix2Pix variant is a plain U-Net from the
//! concatenated input to the output image.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use hrtrack_nn::{Conv2dSpec, Graph, Init, ParamStore, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PairedSample;
use crate::error::{dim_err, Error, Result};
use crate::nets::{add_conv, Padding, Params, PatchNetSpec, UNetSpec, LEAK};
use crate::raster::{band_concat, CoordinateGrid, PixelSpace, RasterImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ead,
    Pix2pix,
}

/// How `G_p` consumes the feature map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    /// Features and encoding are concatenated at the input.
    #[default]
    Concat,
    /// The encoding drives the hidden state; features produce a per-layer
    /// scale and shift.
    Modulation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub variant: Variant,
    pub bands: usize,
    /// Patch side `H = W`.
    pub patch: usize,
    /// Encoder widths; the first is the full-resolution stem.
    pub widths: Vec<usize>,
    /// Channels `D_f` of the feature map.
    pub feature_dim: usize,
    pub n_freq: usize,
    /// Side `G_e` of the learned spatial embedding grid.
    pub embed_grid: usize,
    pub embed_dim: usize,
    pub synth_hidden: usize,
    pub synth_layers: usize,
    #[serde(default)]
    pub synth_mode: SynthMode,
    #[serde(default)]
    pub padding: Padding,
    /// One stride-2 discriminator stage per entry.
    pub disc_widths: Vec<usize>,
}

impl GeneratorConfig {
    /// 16×16 configuration small enough for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            variant: Variant::Ead,
            bands: 3,
            patch: 16,
            widths: vec![4, 6],
            feature_dim: 6,
            n_freq: 2,
            embed_grid: 4,
            embed_dim: 3,
            synth_hidden: 8,
            synth_layers: 1,
            synth_mode: SynthMode::Concat,
            padding: Padding::Zero,
            disc_widths: vec![4, 6],
        }
    }

    /// 64×64 configuration for CPU training.
    pub fn desk() -> Self {
        Self {
            variant: Variant::Ead,
            bands: 3,
            patch: 64,
            widths: vec![16, 32, 32],
            feature_dim: 32,
            n_freq: 8,
            embed_grid: 32,
            embed_dim: 32,
            synth_hidden: 32,
            synth_layers: 2,
            synth_mode: SynthMode::Concat,
            padding: Padding::Zero,
            disc_widths: vec![16, 32, 32],
        }
    }

    /// 256×256 configuration.
    pub fn paper() -> Self {
        Self {
            variant: Variant::Ead,
            bands: 3,
            patch: 256,
            widths: vec![32, 64, 128, 256],
            feature_dim: 64,
            n_freq: 8,
            embed_grid: 32,
            embed_dim: 32,
            synth_hidden: 64,
            synth_layers: 3,
            synth_mode: SynthMode::Concat,
            padding: Padding::Zero,
            disc_widths: vec![64, 128, 256],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown generator preset `{other}` (tiny, desk, paper)"))),
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("generator: {m}")));
        if self.patch < 16 || !self.patch.is_power_of_two() {
            return bad(format!("patch must be a power of two ≥ 16, got {}", self.patch));
        }
        if self.bands == 0 || self.feature_dim == 0 || self.synth_hidden == 0 || self.embed_dim == 0 {
            return bad("bands and widths must be ≥ 1".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) || self.disc_widths.contains(&0) {
            return bad("widths must be ≥ 1".into());
        }
        if 1 << (self.widths.len() - 1) > self.patch / 2 || 1 << self.disc_widths.len() > self.patch {
            return bad("too many downsampling stages for the patch size".into());
        }
        if self.embed_grid < 2 {
            return bad("embedding grid must be at least 2×2".into());
        }
        Ok(())
    }

    /// Channels `D_e` of the positional encoding.
    pub fn encoding_dim(&self) -> usize {
        6 * self.n_freq + self.embed_dim
    }

    /// Fourier frequencies `2^k·π`, `k = 0..n_freq`.
    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.n_freq).map(|k| (1u64 << k) as f64 * PI).collect()
    }

    /// Spatial downsampling of the discriminator's score map.
    pub fn disc_reduction(&self) -> usize {
        self.disc_spec().reduction()
    }

    fn mapper_spec(&self) -> UNetSpec {
        let (out, attention) = match self.variant {
            Variant::Ead => (self.feature_dim, true),
            Variant::Pix2pix => (self.bands, false),
        };
        UNetSpec {
            in_channels: 2 * self.bands,
            widths: self.widths.clone(),
            out_channels: out,
            attention,
            padding: self.padding,
        }
    }

    fn disc_spec(&self) -> PatchNetSpec {
        PatchNetSpec { in_channels: 3 * self.bands + 2, widths: self.disc_widths.clone(), out_channels: 1 }
    }
}

/// Per-pixel features `[D_f, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(pub Array3<f64>);

/// Per-pixel encoding `[D_e, H, W]`: Fourier channels first, ordered per
/// frequency as `sin x, cos x, sin y, cos y, sin t, cos t`, then the
/// embedding channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding(pub Array3<f64>);

fn array_to_tensor(a: &Array3<f64>) -> Tensor {
    let (c, h, w) = a.dim();
    Tensor::from_vec(&[1, c, h, w], a.iter().copied().collect()).expect("sized from dims")
}

fn tensor_to_array(t: &Tensor) -> Result<Array3<f64>> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 {
        return Err(dim_err("tensor_to_array", format!("batch {n}")));
    }
    Ok(Array3::from_shape_vec((c, h, w), t.data().to_vec()).expect("sized from dims"))
}

fn model_space(img: &RasterImage) -> Result<RasterImage> {
    match img.space() {
        PixelSpace::Model => Ok(img.clone()),
        PixelSpace::Storage => img.to_model_space(),
    }
}

/// Generator input for one sample: the LR frame resized to the reference's
/// dimensions, band-concatenated with the reference, in model space.
pub fn prepare_input(sample: &PairedSample) -> Result<RasterImage> {
    let hr = model_space(&sample.hr_reference)?;
    let lr = model_space(&sample.lr_target)?.resize_to(hr.height(), hr.width())?;
    band_concat(&lr, &hr)
}

/// Inputs for a batch of equally sized samples, all sharing one coordinate
/// window and differing in time.
#[derive(Clone, Debug)]
pub struct SrBatch {
    /// `[n, 2C, H, W]`: upsampled LR then HR reference.
    pub cat: Tensor,
    /// `[n, C, H, W]` HR targets, when every sample has one.
    pub target: Option<Tensor>,
    pub times: Vec<f64>,
    pub grid: CoordinateGrid,
}

impl SrBatch {
    /// Crop every sample at `origin` to `size × size` after resizing the LR
    /// frame to the reference's dimensions. Coordinates are the window of
    /// the full-frame grid.
    pub fn from_samples(samples: &[&PairedSample], origin: (usize, usize), size: usize) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
        let (fh, fw) = (first.hr_reference.height(), first.hr_reference.width());
        let grid = CoordinateGrid::full(fh, fw, 0.0).window(origin.0, origin.1, size, size)?;
        let mut cats = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len());
        for s in samples {
            if (s.hr_reference.height(), s.hr_reference.width()) != (fh, fw) {
                return Err(dim_err("SrBatch", "samples differ in frame size"));
            }
            let cat = prepare_input(s)?.crop(origin.0, origin.1, size, size)?;
            cats.push(cat.to_tensor());
            if let Some(t) = &s.hr_target {
                targets.push(model_space(t)?.crop(origin.0, origin.1, size, size)?.to_tensor());
            }
        }
        let target = (targets.len() == samples.len()).then(|| Tensor::stack_batch(&targets)).transpose()?;
        Ok(Self {
            cat: Tensor::stack_batch(&cats)?,
            target,
            times: samples.iter().map(|s| s.time).collect(),
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `[n, C, H, W]` slice of the concatenated input: `0` for the LR, `1`
    /// for the reference.
    pub fn part(&self, which: usize) -> Tensor {
        let (n, c2, h, w) = self.cat.dims4().expect("rank 4");
        let c = c2 / 2;
        let per = c * h * w;
        let mut data = Vec::with_capacity(n * per);
        for i in 0..n {
            let base = (i * c2 + which * c) * h * w;
            data.extend_from_slice(&self.cat.data()[base..base + per]);
        }
        Tensor::from_vec(&[n, c, h, w], data).expect("sized")
    }

    /// Discriminator conditioning `[n, 2C + 2, H, W]`: upsampled LR,
    /// reference and the `x, y` coordinate channels.
    pub fn condition(&self) -> Tensor {
        let (n, c2, h, w) = self.cat.dims4().expect("rank 4");
        let coords = self.grid.coordinate_channels(n);
        let mut data = Vec::with_capacity(n * (c2 + 2) * h * w);
        for i in 0..n {
            data.extend_from_slice(&self.cat.data()[i * c2 * h * w..(i + 1) * c2 * h * w]);
            data.extend_from_slice(&coords.data()[i * 2 * h * w..(i + 1) * 2 * h * w]);
        }
        Tensor::from_vec(&[n, c2 + 2, h, w], data).expect("sized")
    }
}

/// `[n, 6·n_freq, H, W]` Fourier features of the grid at each time.
pub fn fourier_features(freqs: &[f64], grid: &CoordinateGrid, times: &[f64]) -> Tensor {
    let (h, w) = (grid.height(), grid.width());
    let hw = h * w;
    let nf = freqs.len();
    let mut data = vec![0.0; times.len() * 6 * nf * hw];
    for (i, &t) in times.iter().enumerate() {
        for (k, &f) in freqs.iter().enumerate() {
            let base = (i * 6 * nf + 6 * k) * hw;
            let (st, ct) = (f * t).sin_cos();
            for r in 0..h {
                let (sy, cy) = (f * grid.ys[r]).sin_cos();
                for c in 0..w {
                    let (sx, cx) = (f * grid.xs[c]).sin_cos();
                    let p = r * w + c;
                    data[base + p] = sx;
                    data[base + hw + p] = cx;
                    data[base + 2 * hw + p] = sy;
                    data[base + 3 * hw + p] = cy;
                    data[base + 4 * hw + p] = st;
                    data[base + 5 * hw + p] = ct;
                }
            }
        }
    }
    Tensor::from_vec(&[times.len(), 6 * nf, h, w], data).expect("sized")
}

/// Generator and discriminator parameters with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SrModel {
    pub config: GeneratorConfig,
    pub gen: ParamStore,
    pub disc: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    config: GeneratorConfig,
}

impl SrModel {
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = ParamStore::new();
        config.mapper_spec().init("gen.f", &mut gen, &mut rng);
        if config.variant == Variant::Ead {
            let g = config.embed_grid;
            gen.add("gen.e.embed", &[config.embed_dim, g, g], Init::Uniform(0.5), &mut rng);
            let d_in = config.feature_dim + config.encoding_dim();
            let hid = config.synth_hidden;
            match config.synth_mode {
                SynthMode::Concat => {
                    add_conv(&mut gen, "gen.p.l0", d_in, hid, 1, &mut rng);
                    for l in 1..config.synth_layers.max(1) {
                        add_conv(&mut gen, &format!("gen.p.l{l}"), hid, hid, 1, &mut rng);
                    }
                }
                SynthMode::Modulation => {
                    add_conv(&mut gen, "gen.p.in", config.encoding_dim(), hid, 1, &mut rng);
                    for l in 0..config.synth_layers.max(1) {
                        add_conv(&mut gen, &format!("gen.p.l{l}"), hid, hid, 1, &mut rng);
                        add_conv(&mut gen, &format!("gen.p.m{l}"), config.feature_dim, 2 * hid, 1, &mut rng);
                    }
                }
            }
            add_conv(&mut gen, "gen.p.out", hid, config.bands, 1, &mut rng);
        }
        let mut disc = ParamStore::new();
        config.disc_spec().init("disc", &mut disc, &mut rng);
        Ok(Self { config, gen, disc })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = CheckpointHeader { kind: "sr".into(), config: self.config.clone() };
        let mut all = self.gen.clone();
        all.extend(self.disc.clone());
        all.save(path.as_ref(), &serde_json::to_string(&header)?)
            .map_err(|e| crate::error::file_err(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (json, all) = ParamStore::load(path).map_err(|e| crate::error::file_err(path, e))?;
        let header: CheckpointHeader = serde_json::from_str(&json).map_err(|e| crate::error::file_err(path, e))?;
        if header.kind != "sr" {
            return Err(crate::error::file_err(path, format!("expected an SR checkpoint, found `{}`", header.kind)));
        }
        let fresh = Self::init(header.config, 0)?;
        let (mut gen, mut disc) = (ParamStore::new(), ParamStore::new());
        for (name, t) in all.iter() {
            let dst = if name.starts_with("disc") { &mut disc } else { &mut gen };
            dst.insert(name.clone(), t.clone());
        }
        for (store, reference) in [(&gen, &fresh.gen), (&disc, &fresh.disc)] {
            for (name, t) in reference.iter() {
                match store.get(name) {
                    Some(got) if got.shape() == t.shape() => {}
                    _ => return Err(crate::error::file_err(path, format!("parameter `{name}` missing or misshapen"))),
                }
            }
        }
        Ok(Self { config: fresh.config, gen, disc })
    }

    /// Architecture summary and parameter counts.
    pub fn describe(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "variant        {:?}", c.variant);
        let _ = writeln!(s, "patch          {0}×{0}, {1} bands", c.patch, c.bands);
        let _ = writeln!(s, "mapper widths  {:?}{}", c.widths, if c.variant == Variant::Ead { " + attention" } else { "" });
        if c.variant == Variant::Ead {
            let _ = writeln!(s, "features D_f   {}", c.feature_dim);
            let _ = writeln!(
                s,
                "encoding D_e   {} ({} frequencies, {}×{}×{} embedding)",
                c.encoding_dim(),
                c.n_freq,
                c.embed_grid,
                c.embed_grid,
                c.embed_dim
            );
            let _ = writeln!(s, "pixel network  {} × {} ({:?})", c.synth_layers, c.synth_hidden, c.synth_mode);
        }
        let _ = writeln!(s, "discriminator  {:?}, score map /{}", c.disc_widths, c.disc_reduction());
        let mut groups: BTreeMap<String, usize> = BTreeMap::new();
        for (name, t) in self.gen.iter().chain(self.disc.iter()) {
            let key: Vec<&str> = name.split('.').take(2).collect();
            *groups.entry(key.join(".")).or_insert(0) += t.numel();
        }
        for (k, n) in &groups {
            let _ = writeln!(s, "  {k:<12} {n:>10}");
        }
        let _ = writeln!(s, "  {:<12} {:>10}", "total", self.gen.num_scalars() + self.disc.num_scalars());
        s
    }

    fn check_patch(&self, h: usize, w: usize) -> Result<()> {
        let red = 1 << (self.config.widths.len() - 1);
        if !h.is_multiple_of(red) || !w.is_multiple_of(red) {
            return Err(dim_err("generator", format!("{h}×{w} not divisible by {red}")));
        }
        Ok(())
    }

    /// `F`: features of a `[2C, H, W]` model-space concatenation.
    pub fn feature_map(&self, cat: &RasterImage) -> Result<FeatureMap> {
        self.require(Variant::Ead)?;
        if cat.bands() != 2 * self.config.bands {
            return Err(dim_err("feature_map", format!("{} bands, expected {}", cat.bands(), 2 * self.config.bands)));
        }
        self.check_patch(cat.height(), cat.width())?;
        let mut g = Graph::new();
        let x = g.constant(cat.to_tensor());
        let f = build_features(&mut g, &self.config, Params::new(&self.gen, false), x)?;
        Ok(FeatureMap(tensor_to_array(g.value(f))?))
    }

    /// `E`: positional encoding of `grid` at time `t`.
    pub fn positional_encode(&self, grid: &CoordinateGrid, t: f64) -> Result<PositionalEncoding> {
        self.require(Variant::Ead)?;
        let mut g = Graph::new();
        let e = build_encoding(&mut g, &self.config, Params::new(&self.gen, false), grid, &[t])?;
        Ok(PositionalEncoding(tensor_to_array(g.value(e))?))
    }

    /// `G_p`: model-space pixels from features and encoding. The result
    /// carries placeholder metadata.
    pub fn synthesize_pixels(&self, feat: &FeatureMap, enc: &PositionalEncoding) -> Result<RasterImage> {
        self.require(Variant::Ead)?;
        let (fd, fh, fw) = feat.0.dim();
        let (ed, eh, ew) = enc.0.dim();
        if (fh, fw) != (eh, ew) || fd != self.config.feature_dim || ed != self.config.encoding_dim() {
            return Err(dim_err("synthesize_pixels", format!("features {fd}×{fh}×{fw}, encoding {ed}×{eh}×{ew}")));
        }
        let mut g = Graph::new();
        let f = g.constant(array_to_tensor(&feat.0));
        let e = g.constant(array_to_tensor(&enc.0));
        let y = build_synth(&mut g, &self.config, Params::new(&self.gen, false), f, e)?;
        let meta = RasterImage::constant(1, 1, 1, 0.0)?;
        RasterImage::from_tensor(g.value(y), 0, &meta)
    }

    /// EAD generation over the full grid of the reference at time `t`.
    pub fn generate(&self, sample: &PairedSample, t: f64) -> Result<RasterImage> {
        let grid = CoordinateGrid::full(sample.hr_reference.height(), sample.hr_reference.width(), t);
        self.generate_on_grid(sample, &grid, t)
    }

    /// EAD generation with an explicit coordinate grid (a window of a
    /// larger frame when generating by patch).
    pub fn generate_on_grid(&self, sample: &PairedSample, grid: &CoordinateGrid, t: f64) -> Result<RasterImage> {
        let cat = prepare_input(sample)?;
        if (grid.height(), grid.width()) != (cat.height(), cat.width()) {
            return Err(dim_err("generate", "grid and input sizes differ"));
        }
        let feat = self.feature_map(&cat)?;
        let enc = self.positional_encode(grid, t)?;
        let out = self.synthesize_pixels(&feat, &enc)?;
        Ok(out
            .with_timestamp(sample.lr_target.timestamp())
            .with_aoi(sample.hr_reference.aoi_id())
            .with_gsd(sample.hr_reference.gsd()))
    }

    pub fn generate_pix2pix(&self, sample: &PairedSample) -> Result<RasterImage> {
        self.require(Variant::Pix2pix)?;
        let cat = prepare_input(sample)?;
        self.check_patch(cat.height(), cat.width())?;
        let mut g = Graph::new();
        let x = g.constant(cat.to_tensor());
        let y = build_pix2pix(&mut g, &self.config, Params::new(&self.gen, false), x)?;
        let meta = (*sample.hr_reference).clone().with_timestamp(sample.lr_target.timestamp());
        RasterImage::from_tensor(g.value(y), 0, &meta)
    }

    /// Generate with whichever variant this model is, on `grid` at `t`.
    pub fn generate_any(&self, sample: &PairedSample, grid: &CoordinateGrid, t: f64) -> Result<RasterImage> {
        match self.config.variant {
            Variant::Ead => self.generate_on_grid(sample, grid, t),
            Variant::Pix2pix => self.generate_pix2pix(sample),
        }
    }

    /// Patch scores in `(0, 1)`, one per `2^k × 2^k` block.
    pub fn discriminate(
        &self,
        img: &RasterImage,
        grid: &CoordinateGrid,
        lr: &RasterImage,
        hr_ref: &RasterImage,
    ) -> Result<Array2<f64>> {
        let img = model_space(img)?;
        let hr = model_space(hr_ref)?;
        let lr = model_space(lr)?.resize_to(hr.height(), hr.width())?;
        if (img.height(), img.width()) != (hr.height(), hr.width()) || (grid.height(), grid.width()) != (hr.height(), hr.width()) {
            return Err(dim_err("discriminate", "candidate, reference and grid sizes differ"));
        }
        let red = self.config.disc_reduction();
        if img.height() % red != 0 || img.width() % red != 0 {
            return Err(dim_err("discriminate", format!("sides must be divisible by {red}")));
        }
        let mut g = Graph::new();
        let x = g.constant(img.to_tensor());
        let cond = Tensor::stack_batch(&[band_concat(&lr, &hr)?.to_tensor()])?;
        let batch = SrBatch { cat: cond, target: None, times: vec![grid.time], grid: grid.clone() };
        let c = g.constant(batch.condition());
        let d = build_discriminator(&mut g, &self.config, Params::new(&self.disc, false), x, c)?;
        let t = g.value(d);
        let (_, _, h, w) = t.dims4()?;
        Ok(Array2::from_shape_vec((h, w), t.data().to_vec()).expect("sized"))
    }

    fn require(&self, v: Variant) -> Result<()> {
        if self.config.variant != v {
            return Err(Error::Invalid(format!("operation needs the {v:?} variant, model is {:?}", self.config.variant)));
        }
        Ok(())
    }
}

pub(crate) fn build_features(g: &mut Graph, cfg: &GeneratorConfig, p: Params<'_>, cat: Var) -> Result<Var> {
    cfg.mapper_spec().forward(g, p, "gen.f", cat)
}

pub(crate) fn build_encoding(
    g: &mut Graph,
    cfg: &GeneratorConfig,
    p: Params<'_>,
    grid: &CoordinateGrid,
    times: &[f64],
) -> Result<Var> {
    let fourier = g.constant(fourier_features(&cfg.frequencies(), grid, times));
    let table = p.var(g, "gen.e.embed")?;
    let emb = g.grid_sample(table, &grid.xs, &grid.ys)?;
    let emb = g.broadcast_batch(emb, times.len())?;
    Ok(g.concat_channels(&[fourier, emb])?)
}

pub(crate) fn build_synth(g: &mut Graph, cfg: &GeneratorConfig, p: Params<'_>, feat: Var, enc: Var) -> Result<Var> {
    let one = Conv2dSpec::new(1, 0);
    let hid = cfg.synth_hidden;
    let mut h;
    match cfg.synth_mode {
        SynthMode::Concat => {
            let x = g.concat_channels(&[feat, enc])?;
            h = x;
            for l in 0..cfg.synth_layers.max(1) {
                let c = p.conv(g, &format!("gen.p.l{l}"), h, one)?;
                h = g.leaky_relu(c, LEAK);
            }
        }
        SynthMode::Modulation => {
            let c = p.conv(g, "gen.p.in", enc, one)?;
            h = g.leaky_relu(c, LEAK);
            for l in 0..cfg.synth_layers.max(1) {
                let c = p.conv(g, &format!("gen.p.l{l}"), h, one)?;
                let a = g.leaky_relu(c, LEAK);
                let m = p.conv(g, &format!("gen.p.m{l}"), feat, one)?;
                let scale = g.slice_channels(m, 0, hid)?;
                let shift = g.slice_channels(m, hid, hid)?;
                let gain = g.affine(scale, 1.0, 1.0);
                let mod_ = g.mul(a, gain)?;
                h = g.add(mod_, shift)?;
            }
        }
    }
    let out = p.conv(g, "gen.p.out", h, one)?;
    Ok(g.tanh(out))
}

pub(crate) fn build_pix2pix(g: &mut Graph, cfg: &GeneratorConfig, p: Params<'_>, cat: Var) -> Result<Var> {
    let y = cfg.mapper_spec().forward(g, p, "gen.f", cat)?;
    Ok(g.tanh(y))
}

/// Model-space generator output `[n, C, H, W]` for a batch.
pub(crate) fn build_generator(
    g: &mut Graph,
    cfg: &GeneratorConfig,
    p: Params<'_>,
    cat: Var,
    grid: &CoordinateGrid,
    times: &[f64],
) -> Result<Var> {
    match cfg.variant {
        Variant::Ead => {
            let f = build_features(g, cfg, p, cat)?;
            let e = build_encoding(g, cfg, p, grid, times)?;
            build_synth(g, cfg, p, f, e)
        }
        Variant::Pix2pix => build_pix2pix(g, cfg, p, cat),
    }
}

/// Sigmoid patch scores for candidate images `img` under conditioning `cond`
/// (see [`SrBatch::condition`]).
pub(crate) fn build_discriminator(g: &mut Graph, cfg: &GeneratorConfig, p: Params<'_>, img: Var, cond: Var) -> Result<Var> {
    let x = g.concat_channels(&[img, cond])?;
    let logits = cfg.disc_spec().forward(g, p, "disc", x)?;
    Ok(g.sigmoid(logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use rand::Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64, ts: i64) -> RasterImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = Array3::from_shape_fn((c, h, w), |_| rng.random_range(0.0..1.0));
        RasterImage::new(px, ts, "a", 4.0).unwrap()
    }

    fn sample(lr: RasterImage, hr: RasterImage, time: f64) -> PairedSample {
        PairedSample {
            lr_target: Arc::new(lr),
            hr_reference: Arc::new(hr),
            hr_target: None,
            t_index: 0,
            t_ref_index: 1,
            time,
        }
    }

    fn tiny_sample(seed: u64) -> PairedSample {
        sample(random_image(3, 2, 2, seed, 0), random_image(3, 16, 16, seed + 1, 1), 0.0)
    }

    #[test]
    fn encoding_at_origin_is_sin_zero_cos_one() {
        let cfg = GeneratorConfig::tiny();
        let grid = CoordinateGrid { xs: vec![0.0], ys: vec![0.0], time: 0.0 };
        let f = fourier_features(&cfg.frequencies(), &grid, &[0.0]);
        for (ch, v) in f.data().iter().enumerate() {
            assert_eq!(*v, if ch % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn time_changes_encoding_and_output() {
        let model = SrModel::init(GeneratorConfig::tiny(), 3).unwrap();
        let grid = CoordinateGrid::full(16, 16, 0.0);
        let e0 = model.positional_encode(&grid, 0.0).unwrap();
        let e1 = model.positional_encode(&grid, 1.0).unwrap();
        // cos(π·t) flips sign between t = 0 and t = 1.
        assert_eq!(e0.0[[5, 3, 3]], 1.0);
        assert!((e1.0[[5, 3, 3]] + 1.0).abs() < 1e-12);
        let s = tiny_sample(1);
        assert_ne!(model.generate(&s, 0.0).unwrap(), model.generate(&s, 1.0).unwrap());
    }

    #[test]
    fn shapes_ranges_and_determinism() {
        let model = SrModel::init(GeneratorConfig::tiny(), 0).unwrap();
        let s = tiny_sample(2);
        let out = model.generate(&s, 0.5).unwrap();
        assert_eq!(out.dims(), (3, 16, 16));
        assert_eq!(out.space(), PixelSpace::Model);
        assert!(out.pixels().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(out, model.generate(&s, 0.5).unwrap());
        let grid = CoordinateGrid::full(16, 16, 0.5);
        let d = model.discriminate(&s.hr_reference, &grid, &s.lr_target, &s.hr_reference).unwrap();
        assert_eq!(d.dim(), (16 / model.config.disc_reduction(), 16 / model.config.disc_reduction()));
        assert!(d.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn zero_weights_give_bias_broadcast() {
        let mut model = SrModel::init(GeneratorConfig::tiny(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (name, t) in model.gen.iter_mut() {
            if name.ends_with(".w") {
                t.data_mut().fill(0.0);
            } else {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            }
        }
        let cat = prepare_input(&tiny_sample(4)).unwrap();
        let f = model.feature_map(&cat).unwrap();
        let head = model.gen.get("gen.f.head.b").unwrap().data().to_vec();
        for ((c, _, _), v) in f.0.indexed_iter() {
            assert_eq!(*v, head[c]);
        }
    }

    #[test]
    fn pixel_network_is_local() {
        let model = SrModel::init(GeneratorConfig::tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feat = FeatureMap(Array3::from_shape_fn((6, 4, 4), |_| rng.random_range(-1.0..1.0)));
        let enc = model.positional_encode(&CoordinateGrid::full(4, 4, 0.3), 0.3).unwrap();
        let out = model.synthesize_pixels(&feat, &enc).unwrap();
        // Reverse the 16 pixels in both inputs; outputs reverse identically.
        let flip = |a: &Array3<f64>| Array3::from_shape_fn(a.dim(), |(c, r, col)| a[[c, 3 - r, 3 - col]]);
        let out2 = model.synthesize_pixels(&FeatureMap(flip(&feat.0)), &PositionalEncoding(flip(&enc.0))).unwrap();
        assert_eq!(out2.pixels(), &flip(out.pixels()));
        // Equal inputs at two pixels give equal outputs.
        let mut f3 = feat.0.clone();
        let mut e3 = enc.0.clone();
        for c in 0..6 {
            f3[[c, 0, 1]] = f3[[c, 2, 2]];
        }
        for c in 0..e3.dim().0 {
            e3[[c, 0, 1]] = e3[[c, 2, 2]];
        }
        let out3 = model.synthesize_pixels(&FeatureMap(f3), &PositionalEncoding(e3)).unwrap();
        for b in 0..3 {
            assert_eq!(out3.pixels()[[b, 0, 1]], out3.pixels()[[b, 2, 2]]);
        }
    }

    #[test]
    fn modulation_mode_runs() {
        let cfg = GeneratorConfig { synth_mode: SynthMode::Modulation, ..GeneratorConfig::tiny() };
        let model = SrModel::init(cfg, 1).unwrap();
        let out = model.generate(&tiny_sample(3), 0.2).unwrap();
        assert_eq!(out.dims(), (3, 16, 16));
    }

    #[test]
    fn pix2pix_ignores_time_and_matches_shape() {
        let model = SrModel::init(GeneratorConfig::tiny().with_variant(Variant::Pix2pix), 0).unwrap();
        let s = tiny_sample(5);
        let a = model.generate_pix2pix(&s).unwrap();
        let grid = CoordinateGrid::full(16, 16, 0.0);
        assert_eq!(a, model.generate_any(&s, &grid, 0.9).unwrap());
        assert_eq!(a.dims(), (3, 16, 16));
        assert!(model.generate(&s, 0.0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = SrModel::init(GeneratorConfig::tiny(), 11).unwrap();
        let p = dir.path().join("m.ckpt");
        model.save(&p).unwrap();
        assert_eq!(SrModel::load(&p).unwrap(), model);
        assert!(model.describe().contains("total"));
    }

    #[test]
    fn bad_configs_are_rejected() {
        for cfg in [
            GeneratorConfig { patch: 48, ..GeneratorConfig::tiny() },
            GeneratorConfig { patch: 8, ..GeneratorConfig::tiny() },
            GeneratorConfig { widths: vec![], ..GeneratorConfig::tiny() },
            GeneratorConfig { disc_widths: vec![2, 2, 2, 2, 2], ..GeneratorConfig::tiny() },
        ] {
            assert!(SrModel::init(cfg, 0).is_err());
        }
    }
}
