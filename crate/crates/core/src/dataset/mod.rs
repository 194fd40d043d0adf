//! Training/inference pair construction, usability filtering, AOI splits,
//! synthetic scenes and the on-disk AOI layout.

mod io;
mod synth;

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{normalized_time, ImageTimeSeries, RasterImage};

pub use io::{
    hr_frame_size, ingest_summary, list_aois, load_png, read_aoi, read_frames, read_manifest, save_png, write_aoi, write_frames, AoiData, AoiManifest, FrameEntry, IngestSummary,
};
pub use synth::{degrade, synthesize_aoi, synthesize_scene, SceneSpec};

/// One generator input: the LR frame at target time `t`, an HR reference
/// from time `t′`, and (for training) the HR frame at `t`.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub lr_target: Arc<RasterImage>,
    pub hr_reference: Arc<RasterImage>,
    pub hr_target: Option<Arc<RasterImage>>,
    pub t_index: usize,
    pub t_ref_index: usize,
    /// Target month normalized over the series span.
    pub time: f64,
}

impl PairedSample {
    pub fn is_training(&self) -> bool {
        self.hr_target.is_some()
    }
}

/// Per-frame occlusion (cloud/haze) fraction source.
pub trait OcclusionEstimator {
    fn occlusion(&self, frame: &RasterImage) -> f64;
}

/// Occlusion fractions read from a manifest, keyed by timestamp. Frames
/// without an entry count as clear.
#[derive(Clone, Debug, Default)]
pub struct MetadataOcclusion(pub HashMap<i64, f64>);

impl OcclusionEstimator for MetadataOcclusion {
    fn occlusion(&self, frame: &RasterImage) -> f64 {
        self.0.get(&frame.timestamp()).copied().unwrap_or(0.0)
    }
}

/// Fraction of pixels whose every band exceeds `threshold` (bright, low
/// saturation pixels are taken as cloud).
#[derive(Clone, Copy, Debug)]
pub struct BrightnessOcclusion {
    pub threshold: f64,
}

impl OcclusionEstimator for BrightnessOcclusion {
    fn occlusion(&self, frame: &RasterImage) -> f64 {
        let (c, h, w) = frame.dims();
        let px = frame.pixels();
        let cloudy = (0..h)
            .flat_map(|r| (0..w).map(move |cc| (r, cc)))
            .filter(|&(r, cc)| (0..c).all(|b| px[[b, r, cc]] > self.threshold))
            .count();
        cloudy as f64 / (h * w) as f64
    }
}

/// Drop frames whose occlusion fraction exceeds `threshold`, keeping order.
pub fn filter_usable(
    series: &ImageTimeSeries,
    estimator: &dyn OcclusionEstimator,
    threshold: f64,
) -> Result<ImageTimeSeries> {
    let kept: Vec<RasterImage> = series
        .frames()
        .iter()
        .filter(|f| estimator.occlusion(f) <= threshold)
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptySeries(format!(
            "every frame of `{}` exceeds occlusion threshold {threshold}",
            series.aoi_id()
        )));
    }
    ImageTimeSeries::new(series.aoi_id(), kept)
}

/// Timestamps present in both series, ascending.
fn common_timestamps(lr: &ImageTimeSeries, hr: &ImageTimeSeries) -> Vec<i64> {
    let hr_ts = hr.timestamps();
    lr.timestamps().into_iter().filter(|t| hr_ts.contains(t)).collect()
}

/// Every ordered `(t, t′)` with `t′ ≠ t` over the common timestamps: `K·(K−1)`
/// samples, target-major then reference order.
pub fn make_training_pairs(lr: &ImageTimeSeries, hr: &ImageTimeSeries) -> Result<Vec<PairedSample>> {
    if lr.aoi_id() != hr.aoi_id() {
        return Err(Error::Invalid(format!("LR `{}` and HR `{}` cover different AOIs", lr.aoi_id(), hr.aoi_id())));
    }
    let ts = common_timestamps(lr, hr);
    if ts.len() < 2 {
        return Err(Error::Invalid(format!(
            "training pairs need at least 2 aligned timestamps, `{}` has {}",
            lr.aoi_id(),
            ts.len()
        )));
    }
    let (first, last) = (ts[0], *ts.last().expect("non-empty"));
    let lr_frames: Vec<Arc<RasterImage>> = ts.iter().map(|&t| Arc::new(lr.frame_at(t).expect("common").clone())).collect();
    let hr_frames: Vec<Arc<RasterImage>> = ts.iter().map(|&t| Arc::new(hr.frame_at(t).expect("common").clone())).collect();
    let mut out = Vec::with_capacity(ts.len() * (ts.len() - 1));
    for (i, &t) in ts.iter().enumerate() {
        for j in 0..ts.len() {
            if i == j {
                continue;
            }
            out.push(PairedSample {
                lr_target: lr_frames[i].clone(),
                hr_reference: hr_frames[j].clone(),
                hr_target: Some(hr_frames[i].clone()),
                t_index: i,
                t_ref_index: j,
                time: normalized_time(t, first, last),
            });
        }
    }
    Ok(out)
}

/// One sample per LR frame, all referencing `hr_latest`, which must be at
/// least as recent as every LR frame. `t_ref_index` is the index of the
/// LR frame sharing `hr_latest`'s month, or the series length when none does.
pub fn make_inference_pairs(lr: &ImageTimeSeries, hr_latest: &RasterImage) -> Result<Vec<PairedSample>> {
    let (Some(first), Some(last)) = (lr.first_timestamp(), lr.last_timestamp()) else {
        return Err(Error::EmptySeries(format!("no LR frames for `{}`", lr.aoi_id())));
    };
    if hr_latest.timestamp() < last {
        return Err(Error::Invalid(format!(
            "HR reference at month {} is older than the newest LR frame ({last})",
            hr_latest.timestamp()
        )));
    }
    if hr_latest.aoi_id() != lr.aoi_id() {
        return Err(Error::Invalid("HR reference belongs to another AOI".into()));
    }
    let hr = Arc::new(hr_latest.clone());
    let ref_index = lr.frames().iter().position(|f| f.timestamp() == hr.timestamp()).unwrap_or(lr.len());
    Ok(lr
        .frames()
        .iter()
        .enumerate()
        .map(|(i, f)| PairedSample {
            lr_target: Arc::new(f.clone()),
            hr_reference: hr.clone(),
            hr_target: None,
            t_index: i,
            t_ref_index: ref_index,
            time: normalized_time(f.timestamp(), first, last),
        })
        .collect())
}

/// Disjoint train/test AOI sets drawn by a seeded shuffle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AoiSplit {
    pub train_aois: Vec<String>,
    pub test_aois: Vec<String>,
    pub seed: u64,
}

/// Sort ids, shuffle with `seed`, then take the first `train_count` for
/// training and the next `test_count` for testing. Ids beyond both counts are
/// left out.
pub fn split_aois(aoi_ids: &[String], train_count: usize, test_count: usize, seed: u64) -> Result<AoiSplit> {
    let mut ids = aoi_ids.to_vec();
    ids.sort();
    ids.dedup();
    if train_count + test_count > ids.len() {
        return Err(Error::Invalid(format!(
            "cannot split {} AOIs into {train_count} train + {test_count} test",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test_aois = ids[train_count..train_count + test_count].to_vec();
    ids.truncate(train_count);
    Ok(AoiSplit { train_aois: ids, test_aois, seed })
}
