use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb, Rgba};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{file_err, Error, Result};
use crate::footprint::FootprintSet;
use crate::raster::{ImageTimeSeries, RasterImage};

use super::{filter_usable, MetadataOcclusion};

/// One image file listed in an AOI manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub file: String,
    /// Months since the archive epoch.
    pub timestamp: i64,
    #[serde(default)]
    pub occlusion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AoiManifest {
    pub aoi_id: String,
    pub hr_gsd: f64,
    pub lr_gsd: f64,
    pub hr: Vec<FrameEntry>,
    pub lr: Vec<FrameEntry>,
}

/// Everything stored for one AOI. Occlusion vectors run parallel to the
/// frames of the corresponding series.
#[derive(Clone, Debug, PartialEq)]
pub struct AoiData {
    pub aoi_id: String,
    pub hr: ImageTimeSeries,
    pub lr: ImageTimeSeries,
    pub labels: Option<FootprintSet>,
    pub hr_occlusion: Vec<f64>,
    pub lr_occlusion: Vec<f64>,
}

impl AoiData {
    /// Drop frames above the occlusion threshold from both series.
    pub fn filtered(&self, threshold: f64) -> Result<AoiData> {
        let occ = |s: &ImageTimeSeries, f: &[f64]| {
            MetadataOcclusion(s.timestamps().into_iter().zip(f.iter().copied()).collect())
        };
        let hr_occ = occ(&self.hr, &self.hr_occlusion);
        let lr_occ = occ(&self.lr, &self.lr_occlusion);
        let hr = filter_usable(&self.hr, &hr_occ, threshold)?;
        let lr = filter_usable(&self.lr, &lr_occ, threshold)?;
        let pick = |s: &ImageTimeSeries, m: &MetadataOcclusion| {
            s.timestamps().iter().map(|t| m.0.get(t).copied().unwrap_or(0.0)).collect()
        };
        Ok(AoiData {
            aoi_id: self.aoi_id.clone(),
            hr_occlusion: pick(&hr, &hr_occ),
            lr_occlusion: pick(&lr, &lr_occ),
            hr,
            lr,
            labels: self.labels.clone(),
        })
    }

    /// Months present in both series: one paired frame each.
    pub fn paired_frames(&self) -> usize {
        let hr = self.hr.timestamps();
        self.lr.timestamps().iter().filter(|t| hr.contains(t)).count()
    }
}

/// AOI ids (sub-directories holding a `manifest.json`) under `root`, sorted.
pub fn list_aois(root: impl AsRef<Path>) -> Result<Vec<String>> {
    let root = root.as_ref();
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| file_err(root, e))? {
        let entry = entry?;
        if entry.path().join("manifest.json").is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

fn frame_file(timestamp: i64) -> String {
    format!("m{timestamp:04}.png")
}

/// Write one AOI in the standard layout: `hr/*.png`, `lr/*.png`,
/// `labels.geojson` (when labels exist) and `manifest.json`. Pixels are
/// stored as 16-bit PNG.
pub fn write_aoi(root: impl AsRef<Path>, data: &AoiData) -> Result<PathBuf> {
    let dir = root.as_ref().join(&data.aoi_id);
    for sub in ["hr", "lr"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| file_err(dir.join(sub), e))?;
    }
    let entries = |series: &ImageTimeSeries, occ: &[f64], sub: &str| -> Result<Vec<FrameEntry>> {
        series
            .frames()
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let file = frame_file(f.timestamp());
                save_png(f, dir.join(sub).join(&file))?;
                Ok(FrameEntry { file, timestamp: f.timestamp(), occlusion: occ.get(i).copied().unwrap_or(0.0) })
            })
            .collect()
    };
    let hr = entries(&data.hr, &data.hr_occlusion, "hr")?;
    let lr = entries(&data.lr, &data.lr_occlusion, "lr")?;
    let gsd = |s: &ImageTimeSeries| s.frames().first().map_or(0.0, RasterImage::gsd);
    let manifest = AoiManifest { aoi_id: data.aoi_id.clone(), hr_gsd: gsd(&data.hr), lr_gsd: gsd(&data.lr), hr, lr };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| file_err(&path, e))?;
    if let Some(labels) = &data.labels {
        labels.save(dir.join("labels.geojson"))?;
    }
    Ok(dir)
}

pub fn read_manifest(root: impl AsRef<Path>, aoi_id: &str) -> Result<AoiManifest> {
    let path = root.as_ref().join(aoi_id).join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| file_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| file_err(&path, e))
}

/// `(height, width)` of an AOI's HR frames, read from the first PNG header.
pub fn hr_frame_size(root: impl AsRef<Path>, manifest: &AoiManifest) -> Result<(usize, usize)> {
    let first = manifest.hr.first().ok_or_else(|| Error::EmptySeries(format!("{} has no HR frames", manifest.aoi_id)))?;
    let path = root.as_ref().join(&manifest.aoi_id).join("hr").join(&first.file);
    let (w, h) = image::image_dimensions(&path).map_err(|e| file_err(&path, e))?;
    Ok((h as usize, w as usize))
}

/// Read one AOI written in the standard layout. Labels are optional.
pub fn read_aoi(root: impl AsRef<Path>, aoi_id: &str) -> Result<AoiData> {
    let dir = root.as_ref().join(aoi_id);
    let manifest = read_manifest(root.as_ref(), aoi_id)?;
    let series = |entries: &[FrameEntry], sub: &str, gsd: f64| -> Result<ImageTimeSeries> {
        let mut entries = entries.to_vec();
        entries.sort_by_key(|e| e.timestamp);
        let frames = entries
            .iter()
            .map(|e| {
                let px = load_png(dir.join(sub).join(&e.file))?;
                RasterImage::new(px, e.timestamp, aoi_id, gsd)
            })
            .collect::<Result<Vec<_>>>()?;
        ImageTimeSeries::new(aoi_id, frames)
    };
    let hr = series(&manifest.hr, "hr", manifest.hr_gsd)?;
    let lr = series(&manifest.lr, "lr", manifest.lr_gsd)?;
    let occ = |entries: &[FrameEntry], s: &ImageTimeSeries| {
        s.timestamps()
            .iter()
            .map(|t| entries.iter().find(|e| e.timestamp == *t).map_or(0.0, |e| e.occlusion))
            .collect()
    };
    let labels_path = dir.join("labels.geojson");
    let labels = labels_path.is_file().then(|| FootprintSet::load(&labels_path)).transpose()?;
    Ok(AoiData {
        aoi_id: aoi_id.to_string(),
        hr_occlusion: occ(&manifest.hr, &hr),
        lr_occlusion: occ(&manifest.lr, &lr),
        hr,
        lr,
        labels,
    })
}

/// Write a series as `dir/m{timestamp:04}.png` files.
pub fn write_frames(dir: impl AsRef<Path>, series: &ImageTimeSeries) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
    for f in series.frames() {
        save_png(f, dir.join(frame_file(f.timestamp())))?;
    }
    Ok(())
}

/// Read every `m{timestamp}.png` in `dir` as one series, ordered by month.
pub fn read_frames(dir: impl AsRef<Path>, aoi_id: &str, gsd: f64) -> Result<ImageTimeSeries> {
    let dir = dir.as_ref();
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| file_err(dir, e))? {
        let path = entry?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(ts) = name.strip_prefix('m').and_then(|n| n.strip_suffix(".png")).and_then(|n| n.parse::<i64>().ok()) {
            found.push((ts, path));
        }
    }
    if found.is_empty() {
        return Err(Error::EmptySeries(format!("no frames in {}", dir.display())));
    }
    found.sort();
    let frames = found
        .into_iter()
        .map(|(ts, path)| RasterImage::new(load_png(&path)?, ts, aoi_id, gsd))
        .collect::<Result<Vec<_>>>()?;
    ImageTimeSeries::new(aoi_id, frames)
}

/// Pair bookkeeping over a dataset root after occlusion filtering.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub aois: usize,
    pub hr_frames: usize,
    pub lr_frames: usize,
    /// Months with both an LR and an HR frame, summed over AOIs.
    pub paired_frames: usize,
    /// Ordered `(t, t′)` training pairs, summed over AOIs.
    pub ordered_pairs: usize,
}

impl IngestSummary {
    pub fn add(&mut self, data: &AoiData) {
        let k = data.paired_frames();
        self.aois += 1;
        self.hr_frames += data.hr.len();
        self.lr_frames += data.lr.len();
        self.paired_frames += k;
        self.ordered_pairs += k * k.saturating_sub(1);
    }
}

/// Summarize the given AOIs under `root`, filtering frames above
/// `occlusion_threshold`. AOIs with every frame excluded are skipped.
pub fn ingest_summary(root: impl AsRef<Path>, aoi_ids: &[String], occlusion_threshold: f64) -> Result<IngestSummary> {
    let mut summary = IngestSummary::default();
    for id in aoi_ids {
        match read_aoi(root.as_ref(), id)?.filtered(occlusion_threshold) {
            Ok(d) => summary.add(&d),
            Err(Error::EmptySeries(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(summary)
}

/// Save a storage-space raster (`[0, 1]`) as a 16-bit PNG with 1, 3 or 4
/// bands.
pub fn save_png(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = img.dims();
    let px = img.pixels();
    let q = |b: usize, r: usize, col: usize| (px[[b, r, col]].clamp(0.0, 1.0) * 65535.0).round() as u16;
    let (w32, h32) = (w as u32, h as u32);
    let dynimg = match c {
        1 => DynamicImage::ImageLuma16(ImageBuffer::from_fn(w32, h32, |x, y| Luma([q(0, y as usize, x as usize)]))),
        3 => DynamicImage::ImageRgb16(ImageBuffer::from_fn(w32, h32, |x, y| {
            let (r, col) = (y as usize, x as usize);
            Rgb([q(0, r, col), q(1, r, col), q(2, r, col)])
        })),
        4 => DynamicImage::ImageRgba16(ImageBuffer::from_fn(w32, h32, |x, y| {
            let (r, col) = (y as usize, x as usize);
            Rgba([q(0, r, col), q(1, r, col), q(2, r, col), q(3, r, col)])
        })),
        _ => return Err(file_err(path, format!("PNG supports 1, 3 or 4 bands, got {c}"))),
    };
    dynimg.save(path).map_err(|e| file_err(path, e))
}

/// Load an 8- or 16-bit PNG into `[0, 1]` pixels, shaped `[bands, H, W]`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| file_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (bands, raw): (usize, Vec<u16>) = match img.color().channel_count() {
        1 | 2 => (1, img.into_luma16().into_raw()),
        3 => (3, img.into_rgb16().into_raw()),
        _ => (4, img.into_rgba16().into_raw()),
    };
    Ok(Array3::from_shape_fn((bands, h, w), |(b, r, c)| raw[(r * w + c) * bands + b] as f64 / 65535.0))
}
