//! Procedural desk-scale scenes: a static textured background on which
//! rectangular buildings appear over time, plus the HR → LR degradation.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::footprint::{Footprint, FootprintSet};
use crate::raster::{ImageTimeSeries, RasterImage};

use super::AoiData;

/// Parameters of one synthetic AOI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_timesteps: usize,
    pub hr_size: usize,
    pub scale_factor: usize,
    pub bands: usize,
    /// Inclusive range of building counts.
    pub building_count: (usize, usize),
    /// Inclusive range of building side lengths in HR pixels.
    pub building_size: (usize, usize),
    /// Maximum absolute rotation in radians.
    pub max_rotation: f64,
    /// Probability that a building already exists at step 0; the others
    /// appear uniformly over steps `1..n_timesteps`.
    pub initial_fraction: f64,
    /// Per-pixel HR sensor noise.
    pub noise_sigma: f64,
    pub lr_blur_sigma: f64,
    pub lr_noise_sigma: f64,
    pub hr_gsd: f64,
    pub start_month: i64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_timesteps: 8,
            hr_size: 64,
            scale_factor: 8,
            bands: 3,
            building_count: (3, 6),
            building_size: (5, 10),
            max_rotation: 0.3,
            initial_fraction: 0.3,
            noise_sigma: 0.01,
            lr_blur_sigma: 2.0,
            lr_noise_sigma: 0.005,
            hr_gsd: 4.0,
            start_month: 0,
        }
    }
}

impl SceneSpec {
    pub fn aoi_id(&self) -> String {
        format!("scene{:05}", self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.scale_factor < 2 {
            return bad(format!("scale_factor must be ≥ 2, got {}", self.scale_factor));
        }
        if self.hr_size == 0 || !self.hr_size.is_multiple_of(self.scale_factor) {
            return bad(format!("hr_size {} not divisible by scale_factor {}", self.hr_size, self.scale_factor));
        }
        if self.n_timesteps == 0 || self.bands == 0 {
            return bad("n_timesteps and bands must be ≥ 1".into());
        }
        if self.building_count.0 > self.building_count.1 || self.building_size.0 > self.building_size.1 {
            return bad("ranges must be ordered (min, max)".into());
        }
        if self.building_size.0 < 2 || self.building_size.1 * 2 >= self.hr_size {
            return bad(format!("building sizes {:?} do not fit a {} px scene", self.building_size, self.hr_size));
        }
        if !(0.0..=1.0).contains(&self.initial_fraction) {
            return bad("initial_fraction must lie in [0, 1]".into());
        }
        if self.noise_sigma < 0.0 || self.lr_noise_sigma < 0.0 || self.lr_blur_sigma < 0.0 {
            return bad("noise and blur levels must be ≥ 0".into());
        }
        Ok(())
    }
}

struct Building {
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    angle: f64,
    color: Vec<f64>,
    appear_t: usize,
}

impl Building {
    fn corners(&self) -> Vec<(f64, f64)> {
        let (s, c) = self.angle.sin_cos();
        [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]
            .iter()
            .map(|&(u, v)| {
                let (dx, dy) = (u * self.half_w, v * self.half_h);
                (self.cx + dx * c - dy * s, self.cy + dx * s + dy * c)
            })
            .collect()
    }

    fn radius(&self) -> f64 {
        self.half_w.hypot(self.half_h)
    }
}

fn render_background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let n = spec.hr_size;
    let base: Vec<f64> = (0..spec.bands).map(|_| rng.random_range(0.22..0.42)).collect();
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / n as f64,
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / n as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.01..0.04),
            )
        })
        .collect();
    let fields: Vec<(usize, usize, usize, usize, Vec<f64>)> = (0..rng.random_range(2..6))
        .map(|_| {
            let (h, w) = (rng.random_range(n / 8..n / 2), rng.random_range(n / 8..n / 2));
            let (r, c) = (rng.random_range(0..n - h), rng.random_range(0..n - w));
            let tone = (0..spec.bands).map(|_| rng.random_range(-0.07..0.07)).collect();
            (r, c, h, w, tone)
        })
        .collect();
    Array3::from_shape_fn((spec.bands, n, n), |(b, r, c)| {
        let mut v = base[b];
        for &(fx, fy, ph, amp) in &waves {
            v += amp * (fx * c as f64 + fy * r as f64 + ph).sin();
        }
        for (fr, fc, fh, fw, tone) in &fields {
            if (*fr..fr + fh).contains(&r) && (*fc..fc + fw).contains(&c) {
                v += tone[b];
            }
        }
        v.clamp(0.0, 1.0)
    })
}

fn place_buildings(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Building> {
    let n = spec.hr_size as f64;
    let count = rng.random_range(spec.building_count.0..=spec.building_count.1);
    let mut out: Vec<Building> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 2000 {
        attempts += 1;
        let w = rng.random_range(spec.building_size.0..=spec.building_size.1) as f64;
        let h = rng.random_range(spec.building_size.0..=spec.building_size.1) as f64;
        let angle = if spec.max_rotation > 0.0 { rng.random_range(-spec.max_rotation..=spec.max_rotation) } else { 0.0 };
        let r = (w * 0.5).hypot(h * 0.5);
        let margin = r + 1.0;
        if 2.0 * margin >= n {
            continue;
        }
        let cx = rng.random_range(margin..n - margin);
        let cy = rng.random_range(margin..n - margin);
        // Keep at least two background pixels between any two buildings.
        if out.iter().any(|b| (b.cx - cx).hypot(b.cy - cy) < b.radius() + r + 2.0) {
            continue;
        }
        let tint = rng.random_range(0.0..0.12);
        let color = (0..spec.bands)
            .map(|b| rng.random_range(0.72..0.9) - if b == 2 { tint } else { 0.0 })
            .collect();
        let appear_t = if spec.n_timesteps == 1 || rng.random_bool(spec.initial_fraction) {
            0
        } else {
            rng.random_range(1..spec.n_timesteps)
        };
        out.push(Building { cx, cy, half_w: w * 0.5, half_h: h * 0.5, angle, color, appear_t });
    }
    out
}

/// Render the HR series and its ground-truth footprints. A building is
/// drawn in frame `k` iff `k ≥ appear_t`; output is a pure function of
/// `spec`.
pub fn synthesize_scene(spec: &SceneSpec) -> Result<(ImageTimeSeries, FootprintSet)> {
    spec.validate()?;
    let aoi = spec.aoi_id();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background = render_background(spec, &mut rng);
    let buildings = place_buildings(spec, &mut rng);
    let n = spec.hr_size;

    let footprints: Vec<Footprint> = buildings
        .iter()
        .map(|b| Footprint { building_id: String::new(), vertices: b.corners(), appear_t: b.appear_t })
        .collect();
    // Pixel membership per building, from the exact polygon.
    let masks: Vec<Vec<(i64, i64)>> = footprints.iter().map(|f| f.pixels(Some((n, n)))).collect();

    let mut frames = Vec::with_capacity(spec.n_timesteps);
    for k in 0..spec.n_timesteps {
        let mut px = background.clone();
        for (b, mask) in buildings.iter().zip(&masks) {
            if b.appear_t <= k {
                for &(r, c) in mask {
                    for band in 0..spec.bands {
                        px[[band, r as usize, c as usize]] = b.color[band];
                    }
                }
            }
        }
        let mut frame_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        frame_rng.set_stream(1 + k as u64);
        let gain = 1.0 + frame_rng.random_range(-0.02..0.02);
        if spec.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, spec.noise_sigma).expect("σ ≥ 0");
            px.mapv_inplace(|v| (v * gain + noise.sample(&mut frame_rng)).clamp(0.0, 1.0));
        } else {
            px.mapv_inplace(|v| (v * gain).clamp(0.0, 1.0));
        }
        frames.push(RasterImage::new(px, spec.start_month + k as i64, aoi.clone(), spec.hr_gsd)?);
    }

    // Identities: row-major by centroid, as the tracker assigns them.
    let mut order: Vec<usize> = (0..footprints.len()).collect();
    order.sort_by(|&a, &b| {
        let (ba, bb) = (&buildings[a], &buildings[b]);
        ba.cy.total_cmp(&bb.cy).then(ba.cx.total_cmp(&bb.cx))
    });
    let polygons = order
        .iter()
        .enumerate()
        .map(|(i, &j)| Footprint { building_id: format!("gt{i:04}"), ..footprints[j].clone() })
        .collect();
    Ok((ImageTimeSeries::new(aoi, frames)?, FootprintSet::new(polygons)))
}

/// HR series, LR series (degraded per frame with a frame-specific seed)
/// and labels for one synthetic AOI.
pub fn synthesize_aoi(spec: &SceneSpec) -> Result<AoiData> {
    let (hr, labels) = synthesize_scene(spec)?;
    let lr_frames = hr
        .frames()
        .iter()
        .enumerate()
        .map(|(k, f)| {
            degrade(
                f,
                spec.scale_factor,
                spec.lr_blur_sigma,
                spec.lr_noise_sigma,
                spec.seed.wrapping_mul(1_000_003).wrapping_add(k as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let lr = ImageTimeSeries::new(hr.aoi_id(), lr_frames)?;
    let n = hr.len();
    Ok(AoiData {
        aoi_id: hr.aoi_id().to_string(),
        hr,
        lr,
        labels: Some(labels),
        hr_occlusion: vec![0.0; n],
        lr_occlusion: vec![0.0; n],
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn blur_plane(plane: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let radius = (kernel.len() / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let horiz = Array2::from_shape_fn((h, w), |(r, c)| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| k * plane[[r, clampi(c as isize + i as isize - radius, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(r, c)| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, k)| k * horiz[[clampi(r as isize + i as isize - radius, h), c]])
            .sum::<f64>()
    })
}

/// Gaussian blur (replicated borders), `scale_factor × scale_factor` block
/// averaging, then additive Gaussian noise clipped to `[0, 1]`. The ground
/// sample distance grows by `scale_factor`.
pub fn degrade(hr: &RasterImage, scale_factor: usize, blur_sigma: f64, noise_sigma: f64, seed: u64) -> Result<RasterImage> {
    let (c, h, w) = hr.dims();
    if scale_factor == 0 || h % scale_factor != 0 || w % scale_factor != 0 {
        return Err(dim_err("degrade", format!("{h}×{w} not divisible by {scale_factor}")));
    }
    let kernel = (blur_sigma > 0.0).then(|| gaussian_kernel(blur_sigma));
    let (oh, ow) = (h / scale_factor, w / scale_factor);
    let area = (scale_factor * scale_factor) as f64;
    let mut out = Array3::zeros((c, oh, ow));
    for b in 0..c {
        let plane = hr.pixels().index_axis(ndarray::Axis(0), b).to_owned();
        let plane = match &kernel {
            Some(k) => blur_plane(&plane, k),
            None => plane,
        };
        for r in 0..oh {
            for cc in 0..ow {
                let mut s = 0.0;
                for dr in 0..scale_factor {
                    for dc in 0..scale_factor {
                        s += plane[[r * scale_factor + dr, cc * scale_factor + dc]];
                    }
                }
                out[[b, r, cc]] = s / area;
            }
        }
    }
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, noise_sigma).expect("σ ≥ 0");
        out.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
    }
    Ok(hr.with_pixels(out)?.with_gsd(hr.gsd() * scale_factor as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SceneSpec {
        SceneSpec { seed, ..Default::default() }
    }

    #[test]
    fn empty_scene_is_static_background() {
        let s = SceneSpec { building_count: (0, 0), noise_sigma: 0.0, ..spec(4) };
        let (hr, fp) = synthesize_scene(&s).unwrap();
        assert!(fp.is_empty());
        // Only the per-frame gain differs; ratios between frames are constant.
        let f0 = hr.frames()[0].pixels();
        for f in hr.frames() {
            let ratio = f.pixels()[[0, 5, 5]] / f0[[0, 5, 5]];
            for (a, b) in f.pixels().iter().zip(f0.iter()) {
                assert!((a - b * ratio).abs() < 1e-9);
            }
        }
        assert_eq!(synthesize_scene(&s).unwrap().0, hr);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synthesize_aoi(&spec(9)).unwrap();
        let b = synthesize_aoi(&spec(9)).unwrap();
        assert_eq!(a.hr, b.hr);
        assert_eq!(a.lr, b.lr);
        assert_eq!(a.labels, b.labels);
        assert_ne!(synthesize_aoi(&spec(10)).unwrap().hr, a.hr);
    }

    #[test]
    fn buildings_follow_schedule_and_never_disappear() {
        let s = SceneSpec { initial_fraction: 0.5, building_count: (6, 6), ..spec(21) };
        let (hr, fp) = synthesize_scene(&s).unwrap();
        assert!(!fp.is_empty());
        fp.validate(hr.len(), 1.0).unwrap();
        let n = s.hr_size;
        let mut prev = 0;
        for k in 0..hr.len() {
            let count = fp.mask_at(k, n, n).iter().filter(|&&b| b).count();
            assert!(count >= prev);
            prev = count;
        }
        // Building pixels carry roof colours only from their appearance onwards.
        for p in &fp.polygons {
            let (r, c) = p.pixels(Some((n, n)))[0];
            let before = p.appear_t.checked_sub(1).map(|k| hr.frames()[k].pixels()[[0, r as usize, c as usize]]);
            let after = hr.frames()[p.appear_t].pixels()[[0, r as usize, c as usize]];
            assert!(after > 0.6, "roof pixel {after}");
            if let Some(b) = before {
                assert!(b < after);
            }
        }
    }

    #[test]
    fn step_zero_buildings_are_always_present() {
        let s = SceneSpec { initial_fraction: 1.0, ..spec(5) };
        let (_, fp) = synthesize_scene(&s).unwrap();
        assert!(fp.polygons.iter().all(|p| p.appear_t == 0));
    }

    #[test]
    fn degrade_shapes_and_constants() {
        let c = RasterImage::constant(3, 256, 256, 0.4).unwrap();
        let lr = degrade(&c, 8, 1.5, 0.0, 0).unwrap();
        assert_eq!(lr.dims(), (3, 32, 32));
        assert_eq!(lr.gsd(), 8.0);
        assert!(lr.pixels().iter().all(|v| (v - 0.4).abs() < 1e-6));
        assert!(degrade(&c, 7, 0.0, 0.0, 0).is_err());
    }

    #[test]
    fn degrade_block_means_match_hand_computation() {
        // 4×4 pattern, factor 2, no blur, no noise:
        // [[0,1,0,1],[1,0,1,0],[1,1,0,0],[1,1,0,1]]
        let vals = [0., 1., 0., 1., 1., 0., 1., 0., 1., 1., 0., 0., 1., 1., 0., 1.];
        let img = RasterImage::new(Array3::from_shape_vec((1, 4, 4), vals.to_vec()).unwrap(), 0, "a", 4.0).unwrap();
        let lr = degrade(&img, 2, 0.0, 0.0, 0).unwrap();
        let got: Vec<f64> = lr.pixels().iter().copied().collect();
        assert_eq!(got, vec![0.5, 0.5, 1.0, 0.25]);
    }
}
