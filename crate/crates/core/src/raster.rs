//! Raster value types shared by every stage: images, time series and
//! normalized coordinate grids.
//!
//! Pixels live in one of two explicit ranges. Files and synthetic scenes use
//! storage space `[0, 1]`; networks consume and emit model space `[-1, 1]`.
//! Converting between them is always an explicit call.

use hrtrack_nn::Tensor;
use ndarray::{s, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PixelSpace {
    /// `[0, 1]`, used for I/O.
    Storage,
    /// `[-1, 1]`, used by the networks.
    Model,
}

impl PixelSpace {
    pub fn range(self) -> (f64, f64) {
        match self {
            PixelSpace::Storage => (0.0, 1.0),
            PixelSpace::Model => (-1.0, 1.0),
        }
    }
}

/// A `bands × height × width` image of one area of interest at one month.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    pixels: Array3<f64>,
    timestamp: i64,
    aoi_id: String,
    gsd: f64,
    space: PixelSpace,
}

impl RasterImage {
    /// A storage-space image. Fails on empty dimensions, non-finite pixels or
    /// a non-positive ground sample distance.
    pub fn new(pixels: Array3<f64>, timestamp: i64, aoi_id: impl Into<String>, gsd: f64) -> Result<Self> {
        Self::with_space(pixels, timestamp, aoi_id, gsd, PixelSpace::Storage)
    }

    pub fn with_space(
        pixels: Array3<f64>,
        timestamp: i64,
        aoi_id: impl Into<String>,
        gsd: f64,
        space: PixelSpace,
    ) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Invalid(format!("raster dimensions must be ≥ 1, got {c}×{h}×{w}")));
        }
        if !(gsd.is_finite() && gsd > 0.0) {
            return Err(Error::Invalid(format!("ground sample distance must be > 0, got {gsd}")));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite pixel value {v}")));
        }
        Ok(Self { pixels, timestamp, aoi_id: aoi_id.into(), gsd, space })
    }

    /// Constant-valued storage image; handy for tests and padding.
    pub fn constant(bands: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((bands, height, width), value), 0, "const", 1.0)
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn bands(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }

    pub fn timestamp(&self) -> i64 {
        self.timestamp
    }

    pub fn aoi_id(&self) -> &str {
        &self.aoi_id
    }

    pub fn gsd(&self) -> f64 {
        self.gsd
    }

    pub fn space(&self) -> PixelSpace {
        self.space
    }

    /// Same metadata, new pixels (dimensions may differ).
    pub fn with_pixels(&self, pixels: Array3<f64>) -> Result<Self> {
        Self::with_space(pixels, self.timestamp, self.aoi_id.clone(), self.gsd, self.space)
    }

    pub fn with_timestamp(mut self, timestamp: i64) -> Self {
        self.timestamp = timestamp;
        self
    }

    pub fn with_aoi(mut self, aoi_id: impl Into<String>) -> Self {
        self.aoi_id = aoi_id.into();
        self
    }

    pub fn with_gsd(mut self, gsd: f64) -> Self {
        self.gsd = gsd;
        self
    }

    /// Check that every pixel lies in the range of `space`, reporting the
    /// most extreme offending value and its band.
    pub fn check_range(&self, space: PixelSpace) -> Result<()> {
        let (lo, hi) = space.range();
        for (band, plane) in self.pixels.axis_iter(Axis(0)).enumerate() {
            let min = plane.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if min < lo {
                return Err(Error::OutOfRange { band, value: min, lo, hi });
            }
            if max > hi {
                return Err(Error::OutOfRange { band, value: max, lo, hi });
            }
        }
        Ok(())
    }

    /// `v ↦ 2v − 1`.
    pub fn to_model_space(&self) -> Result<Self> {
        if self.space != PixelSpace::Storage {
            return Err(Error::Invalid("image is already in model space".into()));
        }
        self.check_range(PixelSpace::Storage)?;
        let mut out = self.clone();
        out.pixels.mapv_inplace(|v| 2.0 * v - 1.0);
        out.space = PixelSpace::Model;
        Ok(out)
    }

    /// `v ↦ (v + 1) / 2`.
    pub fn from_model_space(&self) -> Result<Self> {
        if self.space != PixelSpace::Model {
            return Err(Error::Invalid("image is already in storage space".into()));
        }
        self.check_range(PixelSpace::Model)?;
        let mut out = self.clone();
        out.pixels.mapv_inplace(|v| (v + 1.0) * 0.5);
        out.space = PixelSpace::Storage;
        Ok(out)
    }

    /// Bilinear resize with corner-aligned sampling: output corners sample
    /// input corners exactly. Resizing to the current size is the identity.
    pub fn resize_to(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid(format!("resize target must be ≥ 1, got {height}×{width}")));
        }
        let (c, h, w) = self.dims();
        if (h, w) == (height, width) {
            return Ok(self.clone());
        }
        let rows = sample_positions(h, height);
        let cols = sample_positions(w, width);
        let mut out = Array3::zeros((c, height, width));
        for b in 0..c {
            let src = self.pixels.index_axis(Axis(0), b);
            for (r, &(r0, fr)) in rows.iter().enumerate() {
                let r1 = (r0 + 1).min(h - 1);
                for (cc, &(c0, fc)) in cols.iter().enumerate() {
                    let c1 = (c0 + 1).min(w - 1);
                    let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
                    let bot = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
                    out[[b, r, cc]] = top * (1.0 - fr) + bot * fr;
                }
            }
        }
        self.with_pixels(out)
    }

    /// Window `[row, row + height) × [col, col + width)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        let (_, h, w) = self.dims();
        if row + height > h || col + width > w || height == 0 || width == 0 {
            return Err(dim_err("crop", format!("window {row}+{height} × {col}+{width} outside {h}×{w}")));
        }
        self.with_pixels(self.pixels.slice(s![.., row..row + height, col..col + width]).to_owned())
    }

    /// `[1, bands, height, width]` tensor of the pixel values.
    pub fn to_tensor(&self) -> Tensor {
        let (c, h, w) = self.dims();
        let data: Vec<f64> = self.pixels.iter().copied().collect();
        Tensor::from_vec(&[1, c, h, w], data).expect("sized from dims")
    }

    /// Build a model-space image from sample `index` of a rank-4 tensor,
    /// copying metadata from `meta`.
    pub fn from_tensor(t: &Tensor, index: usize, meta: &RasterImage) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if index >= n {
            return Err(dim_err("from_tensor", format!("index {index} ≥ batch {n}")));
        }
        let per = c * h * w;
        let data = t.data()[index * per..(index + 1) * per].to_vec();
        let pixels = Array3::from_shape_vec((c, h, w), data).expect("sized from dims");
        Self::with_space(pixels, meta.timestamp, meta.aoi_id.clone(), meta.gsd, PixelSpace::Model)
    }
}

/// For each output index, the lower source index and interpolation weight.
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, f64)> {
    (0..dst)
        .map(|i| {
            let p = if dst == 1 {
                (src - 1) as f64 * 0.5
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let i0 = (p.floor() as usize).min(src - 1);
            (i0, p - i0 as f64)
        })
        .collect()
}

/// Band-wise concatenation: `a`'s bands first, then `b`'s. Metadata is
/// taken from `a`.
pub fn band_concat(a: &RasterImage, b: &RasterImage) -> Result<RasterImage> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(dim_err(
            "band_concat",
            format!("{}×{} vs {}×{}", a.height(), a.width(), b.height(), b.width()),
        ));
    }
    if a.space != b.space {
        return Err(Error::Invalid("band_concat across pixel spaces".into()));
    }
    let pixels = ndarray::concatenate(Axis(0), &[a.pixels.view(), b.pixels.view()]).expect("checked dims");
    a.with_pixels(pixels)
}

/// Frames of one AOI ordered by strictly increasing timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTimeSeries {
    frames: Vec<RasterImage>,
    aoi_id: String,
}

impl ImageTimeSeries {
    pub fn new(aoi_id: impl Into<String>, frames: Vec<RasterImage>) -> Result<Self> {
        let aoi_id = aoi_id.into();
        if let Some(first) = frames.first() {
            let dims = first.dims();
            for pair in frames.windows(2) {
                if pair[1].timestamp <= pair[0].timestamp {
                    return Err(Error::Invalid(format!(
                        "timestamps must increase strictly ({} then {})",
                        pair[0].timestamp, pair[1].timestamp
                    )));
                }
            }
            for f in &frames {
                if f.aoi_id != aoi_id {
                    return Err(Error::Invalid(format!("frame from AOI `{}` in series `{aoi_id}`", f.aoi_id)));
                }
                if f.dims() != dims {
                    return Err(dim_err("ImageTimeSeries", format!("{:?} vs {:?}", f.dims(), dims)));
                }
            }
        }
        Ok(Self { frames, aoi_id })
    }

    pub fn frames(&self) -> &[RasterImage] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<RasterImage> {
        self.frames
    }

    pub fn aoi_id(&self) -> &str {
        &self.aoi_id
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamps(&self) -> Vec<i64> {
        self.frames.iter().map(|f| f.timestamp).collect()
    }

    pub fn first_timestamp(&self) -> Option<i64> {
        self.frames.first().map(|f| f.timestamp)
    }

    pub fn last_timestamp(&self) -> Option<i64> {
        self.frames.last().map(|f| f.timestamp)
    }

    pub fn frame_at(&self, timestamp: i64) -> Option<&RasterImage> {
        self.frames.iter().find(|f| f.timestamp == timestamp)
    }
}

/// Month index mapped so that `first → 0` and `last → 1`. A single-month span
/// maps to 0.
pub fn normalized_time(timestamp: i64, first: i64, last: i64) -> f64 {
    if last == first {
        0.0
    } else {
        (timestamp - first) as f64 / (last - first) as f64
    }
}

/// Normalized pixel coordinates for an `H × W` grid: column `j` of a full
/// frame maps to `x = −1 + 2j/(W − 1)`, row `i` to `y = −1 + 2i/(H − 1)`.
/// Tiles carry the slice of the full-frame coordinates they cover.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub time: f64,
}

impl CoordinateGrid {
    pub fn full(height: usize, width: usize, time: f64) -> Self {
        Self { xs: axis_coords(width), ys: axis_coords(height), time }
    }

    pub fn height(&self) -> usize {
        self.ys.len()
    }

    pub fn width(&self) -> usize {
        self.xs.len()
    }

    /// Sub-grid covering rows `[row, row + h)` and columns `[col, col + w)`.
    pub fn window(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        if row + h > self.height() || col + w > self.width() {
            return Err(dim_err("CoordinateGrid::window", format!("{row}+{h}, {col}+{w}")));
        }
        Ok(Self { xs: self.xs[col..col + w].to_vec(), ys: self.ys[row..row + h].to_vec(), time: self.time })
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    /// `(x, y)` of cell `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> (f64, f64) {
        (self.xs[col], self.ys[row])
    }

    /// `[n, 2, H, W]` tensor with x then y channels.
    pub fn coordinate_channels(&self, n: usize) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let mut one = Vec::with_capacity(2 * h * w);
        for _ in 0..h {
            one.extend_from_slice(&self.xs);
        }
        for &y in &self.ys {
            one.extend(std::iter::repeat_n(y, w));
        }
        Tensor::from_vec(&[n, 2, h, w], one.repeat(n)).expect("sized")
    }
}

fn axis_coords(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|j| -1.0 + 2.0 * j as f64 / (n - 1) as f64).collect()
}
