//! Per-frame building segmentation followed by temporal collapse (pixelwise
//! maximum over time), polygonization of the collapsed map, and spatial
//! collapse (an appearance timestep per polygon).

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use hrtrack_nn::{Graph, ParamStore, Tensor};
use ndarray::{s, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, file_err, Error, Result};
use crate::footprint::{Footprint, FootprintSet};
use crate::nets::{Padding, Params, UNetSpec};
use crate::patch::{crop_tiles, plan_tiles, TilePlan};
use crate::raster::{ImageTimeSeries, PixelSpace, RasterImage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub bands: usize,
    /// Backbone encoder widths.
    pub widths: Vec<usize>,
    /// Bilinear enlargement applied before tiling.
    pub enlarge: usize,
    pub patch: usize,
    pub tau_bin: f64,
    pub tau_app: f64,
    /// Polygons with at most this many pixels are dropped.
    pub min_area: f64,
    /// Weight of building pixels in the training loss.
    pub pos_weight: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrackerConfig {
    pub fn desk() -> Self {
        Self {
            bands: 3,
            widths: vec![8, 16, 16],
            enlarge: 3,
            patch: 64,
            tau_bin: 0.5,
            tau_app: 0.5,
            min_area: 6.0,
            pos_weight: 1.0,
        }
    }

    pub fn paper() -> Self {
        Self { widths: vec![32, 64, 128, 256], patch: 512, min_area: 20.0, ..Self::desk() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown tracker preset `{other}` (desk, paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.tau_bin) || !open(self.tau_app) {
            return Err(Error::Config("tracker thresholds must lie in (0, 1)".into()));
        }
        if self.enlarge == 0 || self.bands == 0 || self.pos_weight <= 0.0 {
            return Err(Error::Config("tracker enlargement, bands and pos_weight must be positive".into()));
        }
        let spec = self.backbone();
        spec.validate("tracker")?;
        if self.patch == 0 || !self.patch.is_multiple_of(spec.reduction()) {
            return Err(Error::Config(format!("tracker patch {} not divisible by {}", self.patch, spec.reduction())));
        }
        Ok(())
    }

    fn backbone(&self) -> UNetSpec {
        UNetSpec {
            in_channels: self.bands,
            widths: self.widths.clone(),
            out_channels: 1,
            attention: false,
            padding: Padding::Zero,
        }
    }
}

/// Per-timestep building probabilities, aligned with a series.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMapSeries {
    pub maps: Vec<Array2<f64>>,
}

impl ProbabilityMapSeries {
    pub fn new(maps: Vec<Array2<f64>>) -> Result<Self> {
        if let Some(first) = maps.first() {
            let dim = first.dim();
            for m in &maps {
                if m.dim() != dim {
                    return Err(dim_err("ProbabilityMapSeries", format!("{:?} vs {:?}", m.dim(), dim)));
                }
                if m.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Invalid("probabilities must lie in [0, 1]".into()));
                }
            }
        }
        Ok(Self { maps })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// An enlarged frame cut into patches, with what is needed to map patch
/// outputs back to the original pixel grid.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub patches: Vec<RasterImage>,
    pub plan: TilePlan,
    pub original: (usize, usize),
    /// Size after enlargement, before reflective padding.
    pub enlarged: (usize, usize),
    pub factor: usize,
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

fn pad_reflect(a: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, ah, aw) = a.dim();
    Array3::from_shape_fn((c, h, w), |(b, r, col)| a[[b, reflect(r, ah), reflect(col, aw)]])
}

/// Enlarge bilinearly by `cfg.enlarge`, pad reflectively up to a multiple of
/// the patch size, and tile without overlap.
pub fn preprocess_frame(img: &RasterImage, cfg: &TrackerConfig) -> Result<PatchSet> {
    let (h, w) = (img.height(), img.width());
    let (eh, ew) = (h * cfg.enlarge, w * cfg.enlarge);
    let big = img.resize_to(eh, ew)?;
    let (ph, pw) = (eh.div_ceil(cfg.patch) * cfg.patch, ew.div_ceil(cfg.patch) * cfg.patch);
    let padded = if (ph, pw) == (eh, ew) { big } else { big.with_pixels(pad_reflect(big.pixels(), ph, pw))? };
    let plan = plan_tiles(ph, pw, cfg.patch)?;
    Ok(PatchSet { patches: crop_tiles(&padded, &plan)?, plan, original: (h, w), enlarged: (eh, ew), factor: cfg.enlarge })
}

/// Stitch per-patch maps, drop the padding, and area-average back to the
/// original size.
pub fn reassemble(maps: &[Array2<f64>], set: &PatchSet) -> Result<Array2<f64>> {
    if maps.len() != set.plan.len() {
        return Err(Error::Tiling(format!("{} maps for {} patches", maps.len(), set.plan.len())));
    }
    let p = set.plan.patch;
    let mut big = Array2::zeros((set.plan.height, set.plan.width));
    for (m, &(r, c)) in maps.iter().zip(&set.plan.origins) {
        if m.dim() != (p, p) {
            return Err(dim_err("reassemble", format!("patch map {:?}", m.dim())));
        }
        big.slice_mut(s![r..r + p, c..c + p]).assign(m);
    }
    let f = set.factor;
    let area = (f * f) as f64;
    Ok(Array2::from_shape_fn(set.original, |(r, c)| {
        big.slice(s![r * f..(r + 1) * f, c * f..(c + 1) * f]).sum() / area
    }))
}

/// Segmentation backbone parameters with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackerModel {
    pub config: TrackerConfig,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct TrackerHeader {
    kind: String,
    config: TrackerConfig,
}

impl TrackerModel {
    pub fn init(config: TrackerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        config.backbone().init("trk", &mut params, &mut rng);
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = TrackerHeader { kind: "tracker".into(), config: self.config.clone() };
        self.params
            .save(path.as_ref(), &serde_json::to_string(&header)?)
            .map_err(|e| file_err(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (json, params) = ParamStore::load(path).map_err(|e| file_err(path, e))?;
        let header: TrackerHeader = serde_json::from_str(&json).map_err(|e| file_err(path, e))?;
        if header.kind != "tracker" {
            return Err(file_err(path, format!("expected a tracker checkpoint, found `{}`", header.kind)));
        }
        let fresh = Self::init(header.config, 0)?;
        for (name, t) in fresh.params.iter() {
            if params.get(name).map(Tensor::shape) != Some(t.shape()) {
                return Err(file_err(path, format!("parameter `{name}` missing or misshapen")));
            }
        }
        Ok(Self { config: fresh.config, params })
    }

    pub fn describe(&self) -> String {
        format!(
            "tracker backbone {:?}, ×{} enlargement, {}×{} patches, {} parameters\n",
            self.config.widths,
            self.config.enlarge,
            self.config.patch,
            self.config.patch,
            self.params.num_scalars()
        )
    }

    /// Logits `[n, 1, P, P]` for a batch of model-space patches.
    pub(crate) fn build_logits(&self, g: &mut Graph, x: hrtrack_nn::Var, trainable: bool) -> Result<hrtrack_nn::Var> {
        self.config.backbone().forward(g, Params::new(&self.params, trainable), "trk", x)
    }

    /// Model-space `[n, C, P, P]` input tensor for patches.
    pub(crate) fn patch_tensor(&self, patches: &[RasterImage]) -> Result<Tensor> {
        let ts = patches
            .iter()
            .map(|p| {
                if p.bands() != self.config.bands {
                    return Err(dim_err("tracker", format!("{} bands, expected {}", p.bands(), self.config.bands)));
                }
                Ok(match p.space() {
                    PixelSpace::Model => p.to_tensor(),
                    PixelSpace::Storage => p.to_model_space()?.to_tensor(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack_batch(&ts)?)
    }

    /// Building probability per pixel of one frame.
    pub fn segment_frame(&self, img: &RasterImage) -> Result<Array2<f64>> {
        let set = preprocess_frame(img, &self.config)?;
        let mut g = Graph::new();
        let x = g.constant(self.patch_tensor(&set.patches)?);
        let logits = self.build_logits(&mut g, x, false)?;
        let probs = g.sigmoid(logits);
        let p = self.config.patch;
        let maps: Vec<Array2<f64>> = g
            .value(probs)
            .data()
            .chunks(p * p)
            .map(|c| Array2::from_shape_vec((p, p), c.to_vec()).expect("patch sized"))
            .collect();
        reassemble(&maps, &set)
    }

    pub fn segment_series(&self, series: &ImageTimeSeries) -> Result<ProbabilityMapSeries> {
        let frames = series.frames();
        let maps = hrtrack_nn::exec::map_indexed(frames.len(), |i| self.segment_frame(&frames[i]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        ProbabilityMapSeries::new(maps)
    }

    /// Segment, collapse over time, polygonize and assign appearance times.
    pub fn track(&self, series: &ImageTimeSeries) -> Result<FootprintSet> {
        let probs = self.segment_series(series)?;
        track_probabilities(&probs, &self.config)
    }
}

/// The post-processing half of tracking, from probability maps onwards.
pub fn track_probabilities(probs: &ProbabilityMapSeries, cfg: &TrackerConfig) -> Result<FootprintSet> {
    let collapsed = temporal_collapse(probs)?;
    let polys = polygonize(&collapsed, cfg.tau_bin, cfg.min_area);
    spatial_collapse(&polys, probs, cfg.tau_app)
}

/// Pixelwise maximum over time.
pub fn temporal_collapse(probs: &ProbabilityMapSeries) -> Result<Array2<f64>> {
    let first = probs.maps.first().ok_or_else(|| Error::EmptySeries("no probability maps to collapse".into()))?;
    let mut out = first.clone();
    for m in &probs.maps[1..] {
        out.zip_mut_with(m, |a, &b| *a = a.max(b));
    }
    Ok(out)
}

/// 4-connected components of `map > tau_bin`, each as a pixel list in
/// row-major discovery order.
fn components(mask: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut label = Array2::from_elem((h, w), usize::MAX);
    let mut out = Vec::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if !mask[[r0, c0]] || label[[r0, c0]] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut pixels = Vec::new();
            let mut queue = VecDeque::from([(r0, c0)]);
            label[[r0, c0]] = id;
            while let Some((r, c)) = queue.pop_front() {
                pixels.push((r, c));
                let nbrs = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
                for (nr, nc) in nbrs {
                    if nr < h && nc < w && mask[[nr, nc]] && label[[nr, nc]] == usize::MAX {
                        label[[nr, nc]] = id;
                        queue.push_back((nr, nc));
                    }
                }
            }
            out.push(pixels);
        }
    }
    out
}

/// Outer boundary of a 4-connected pixel set along pixel edges, clockwise
/// on screen (interior on the right), collinear vertices removed. Where two
/// diagonal pixels meet at a corner the walk turns right, keeping them
/// apart as 4-connectivity requires.
fn trace_outer(pixels: &[(usize, usize)]) -> Vec<(f64, f64)> {
    use std::collections::HashSet;
    let set: HashSet<(i64, i64)> = pixels.iter().map(|&(r, c)| (r as i64, c as i64)).collect();
    let inside = |r: i64, c: i64| set.contains(&(r, c));
    // Directed edges keyed by start vertex (x, y); direction 0=E 1=S 2=W 3=N.
    let mut out_edges: HashMap<(i64, i64), Vec<u8>> = HashMap::new();
    for &(r, c) in &set {
        if !inside(r - 1, c) {
            out_edges.entry((c, r)).or_default().push(0);
        }
        if !inside(r, c + 1) {
            out_edges.entry((c + 1, r)).or_default().push(1);
        }
        if !inside(r + 1, c) {
            out_edges.entry((c + 1, r + 1)).or_default().push(2);
        }
        if !inside(r, c - 1) {
            out_edges.entry((c, r + 1)).or_default().push(3);
        }
    }
    let step = |(x, y): (i64, i64), d: u8| match d {
        0 => (x + 1, y),
        1 => (x, y + 1),
        2 => (x - 1, y),
        _ => (x, y - 1),
    };
    // The top-left pixel's top edge lies on the outer boundary.
    let &(r0, c0) = pixels.iter().min().expect("non-empty component");
    let start = (c0 as i64, r0 as i64);
    let mut pos = start;
    let mut dir = 0u8;
    let mut ring = vec![start];
    let mut used: HashSet<((i64, i64), u8)> = HashSet::new();
    used.insert((start, 0));
    loop {
        pos = step(pos, dir);
        if pos == start {
            break;
        }
        let cands = out_edges.get(&pos).map(Vec::as_slice).unwrap_or(&[]);
        // Right turn, straight, then left.
        let next = [(dir + 1) % 4, dir, (dir + 3) % 4]
            .into_iter()
            .find(|d| cands.contains(d) && !used.contains(&(pos, *d)))
            .expect("pixel-edge boundaries are closed");
        used.insert((pos, next));
        if next != dir {
            ring.push(pos);
        }
        dir = next;
    }
    ring.into_iter().map(|(x, y)| (x as f64, y as f64)).collect()
}

/// Binarize at `tau_bin` (strictly greater), take 4-connected components,
/// trace each outer boundary, and drop polygons with area ≤ `min_area`.
/// Ids are empty and `appear_t` is zero; see [`spatial_collapse`].
pub fn polygonize(map: &Array2<f64>, tau_bin: f64, min_area: f64) -> Vec<Footprint> {
    let mask = map.mapv(|v| v > tau_bin);
    components(&mask)
        .into_iter()
        .map(|px| Footprint { building_id: String::new(), vertices: trace_outer(&px), appear_t: 0 })
        .filter(|f| f.area() > min_area)
        .collect()
}

/// Give each polygon the earliest frame whose mean probability over the
/// polygon's pixels reaches `tau_app`; drop polygons that never do. Ids are
/// assigned in row-major order of pixel centroids.
pub fn spatial_collapse(polygons: &[Footprint], probs: &ProbabilityMapSeries, tau_app: f64) -> Result<FootprintSet> {
    let Some(first) = probs.maps.first() else {
        return Ok(FootprintSet::default());
    };
    let (h, w) = first.dim();
    let mut kept: Vec<((f64, f64), Footprint)> = Vec::new();
    for poly in polygons {
        let px = poly.pixels(Some((h, w)));
        if px.is_empty() {
            continue;
        }
        let appear = probs.maps.iter().position(|m| {
            let mean = px.iter().map(|&(r, c)| m[[r as usize, c as usize]]).sum::<f64>() / px.len() as f64;
            mean >= tau_app
        });
        if let Some(t) = appear {
            let n = px.len() as f64;
            let cy = px.iter().map(|p| p.0 as f64).sum::<f64>() / n;
            let cx = px.iter().map(|p| p.1 as f64).sum::<f64>() / n;
            kept.push(((cy, cx), Footprint { appear_t: t, ..poly.clone() }));
        }
    }
    kept.sort_by(|a, b| a.0 .0.total_cmp(&b.0 .0).then(a.0 .1.total_cmp(&b.0 .1)));
    Ok(FootprintSet::new(
        kept.into_iter()
            .enumerate()
            .map(|(i, (_, f))| Footprint { building_id: format!("b{i:04}"), ..f })
            .collect(),
    ))
}

/// Rasterize a boolean mask into `[0, 1]` values (used for training targets).
pub fn mask_to_raster(mask: &Array2<bool>) -> Result<RasterImage> {
    let px = mask.mapv(|b| if b { 1.0 } else { 0.0 }).insert_axis(Axis(0));
    RasterImage::new(px, 0, "mask", 1.0)
}
