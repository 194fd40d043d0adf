//! Segmentation quality (pixel accuracy, IoU, frequency-weighted IoU) and
//! the track-level Tracking Score, plus per-run report assembly.
//!
//! Pixel metrics are computed on per-frame masks and pooled over every
//! frame of an AOI. The report's `iou` column is the mean of the background
//! and building IoUs; [`iou`] gives either class on its own.
//!
//! The Tracking Score is a track F1. Each frame, active predicted and
//! ground-truth polygons are matched one-to-one, greedily by descending IoU
//! (ties by index) with IoU ≥ the threshold. A predicted track is correct
//! when every frame it is matched in pairs it with the same ground-truth
//! track and it is matched in every frame from the later of the two
//! appearance times to the end of the series.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use hrtrack_nn::exec;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{hr_frame_size, list_aois, read_manifest};
use crate::error::{dim_err, file_err, Error, Result};
use crate::footprint::{Footprint, FootprintSet};

/// IoU threshold for a polygon match in the Tracking Score.
pub const TS_IOU_THRESHOLD: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Class {
    Background,
    Building,
}

/// Binary confusion counts. `fp` is background labeled as building.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tp: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<Self> {
        if pred.dim() != gt.dim() {
            return Err(dim_err("confusion", format!("{:?} vs {:?}", pred.dim(), gt.dim())));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            match (p, g) {
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (true, true) => c.tp += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }

    pub fn merge(&mut self, other: &Self) {
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tp += other.tp;
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 1.0;
        }
        (self.tn + self.tp) as f64 / self.total() as f64
    }

    /// IoU of one class; 1 when the class is absent from both masks.
    pub fn iou(&self, class: Class) -> f64 {
        let (inter, union) = match class {
            Class::Building => (self.tp, self.tp + self.fp + self.fn_),
            Class::Background => (self.tn, self.tn + self.fp + self.fn_),
        };
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn mean_iou(&self) -> f64 {
        0.5 * (self.iou(Class::Background) + self.iou(Class::Building))
    }

    /// Class IoUs weighted by ground-truth class frequency.
    pub fn fwiou(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 1.0;
        }
        let bg = (self.tn + self.fp) as f64 / n as f64;
        let fg = (self.fn_ + self.tp) as f64 / n as f64;
        bg * self.iou(Class::Background) + fg * self.iou(Class::Building)
    }
}

pub fn pixel_accuracy(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, gt)?.accuracy())
}

pub fn iou(pred: &Array2<bool>, gt: &Array2<bool>, class: Class) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, gt)?.iou(class))
}

pub fn fwiou(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(pred, gt)?.fwiou())
}

/// Track counts behind a Tracking Score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackCounts {
    pub correct: usize,
    pub pred_tracks: usize,
    pub gt_tracks: usize,
}

impl TrackCounts {
    pub fn score(&self) -> f64 {
        if self.pred_tracks == 0 && self.gt_tracks == 0 {
            return 1.0;
        }
        if self.correct == 0 {
            return 0.0;
        }
        let p = self.correct as f64 / self.pred_tracks as f64;
        let r = self.correct as f64 / self.gt_tracks as f64;
        2.0 * p * r / (p + r)
    }
}

fn check_polygon(p: &Footprint) -> Result<()> {
    if p.vertices.len() < 3 || p.vertices.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite()) || !p.is_simple() {
        return Err(Error::Invalid(format!("malformed polygon `{}`", p.building_id)));
    }
    Ok(())
}

/// Sorted pixel set of each polygon.
fn pixel_sets(set: &FootprintSet) -> Result<Vec<Vec<(i64, i64)>>> {
    set.polygons
        .iter()
        .map(|p| {
            check_polygon(p)?;
            let mut px = p.pixels(None);
            px.sort_unstable();
            Ok(px)
        })
        .collect()
}

fn sorted_iou(a: &[(i64, i64)], b: &[(i64, i64)]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Count correct tracks over a series of `series_len` frames.
pub fn track_counts(pred: &FootprintSet, gt: &FootprintSet, series_len: usize, iou_thresh: f64) -> Result<TrackCounts> {
    let pp = pixel_sets(pred)?;
    let gp = pixel_sets(gt)?;
    // Geometry is static, so candidate pairs and their IoUs are shared by all frames.
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a) in pp.iter().enumerate() {
        for (j, b) in gp.iter().enumerate() {
            let v = sorted_iou(a, b);
            if v >= iou_thresh && v > 0.0 {
                candidates.push((v, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let (np, ng) = (pred.len(), gt.len());
    let mut matches: Vec<Vec<Option<usize>>> = vec![vec![None; series_len]; np];
    for k in 0..series_len {
        let mut pred_used = vec![false; np];
        let mut gt_used = vec![false; ng];
        for &(_, i, j) in &candidates {
            if pred_used[i] || gt_used[j] || pred.polygons[i].appear_t > k || gt.polygons[j].appear_t > k {
                continue;
            }
            pred_used[i] = true;
            gt_used[j] = true;
            matches[i][k] = Some(j);
        }
    }

    let correct = matches
        .iter()
        .enumerate()
        .filter(|(i, m)| {
            let mut partners = m.iter().flatten();
            let Some(&j) = partners.next() else { return false };
            if partners.any(|&other| other != j) {
                return false;
            }
            let from = pred.polygons[*i].appear_t.max(gt.polygons[j].appear_t);
            (from..series_len).all(|k| m[k] == Some(j))
        })
        .count();
    Ok(TrackCounts { correct, pred_tracks: np, gt_tracks: ng })
}

pub fn tracking_score(pred: &FootprintSet, gt: &FootprintSet, series_len: usize, iou_thresh: f64) -> Result<f64> {
    Ok(track_counts(pred, gt, series_len, iou_thresh)?.score())
}

/// Metrics of one AOI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AoiMetrics {
    pub aoi_id: String,
    pub acc: f64,
    pub iou: f64,
    pub fwiou: f64,
    pub ts: f64,
    pub confusion: ConfusionCounts,
    pub tracks: TrackCounts,
}

/// Score predicted footprints against labels over `series_len` frames of
/// `height × width` pixels.
pub fn evaluate_aoi(
    aoi_id: &str,
    pred: &FootprintSet,
    gt: &FootprintSet,
    series_len: usize,
    height: usize,
    width: usize,
) -> Result<AoiMetrics> {
    let per_frame = exec::map_indexed(series_len, |k| {
        ConfusionCounts::from_masks(&pred.mask_at(k, height, width), &gt.mask_at(k, height, width))
    });
    let mut confusion = ConfusionCounts::default();
    for c in per_frame {
        confusion.merge(&c?);
    }
    let tracks = track_counts(pred, gt, series_len, TS_IOU_THRESHOLD)?;
    Ok(AoiMetrics {
        aoi_id: aoi_id.to_string(),
        acc: confusion.accuracy(),
        iou: confusion.mean_iou(),
        fwiou: confusion.fwiou(),
        ts: tracks.score(),
        confusion,
        tracks,
    })
}

/// Unweighted mean of per-AOI metrics, with the breakdown and free-form
/// run metadata (checkpoint, preset, seed, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub iou: f64,
    pub fwiou: f64,
    pub ts: f64,
    pub per_aoi: Vec<AoiMetrics>,
    pub metadata: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn from_aois(per_aoi: Vec<AoiMetrics>, metadata: BTreeMap<String, String>) -> Result<Self> {
        if per_aoi.is_empty() {
            return Err(Error::Invalid("no AOIs to aggregate".into()));
        }
        let n = per_aoi.len() as f64;
        let mean = |f: fn(&AoiMetrics) -> f64| per_aoi.iter().map(f).sum::<f64>() / n;
        let report = Self {
            acc: mean(|m| m.acc),
            iou: mean(|m| m.iou),
            fwiou: mean(|m| m.fwiou),
            ts: mean(|m| m.ts),
            per_aoi,
            metadata,
        };
        for v in report.values() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!("metric value {v} outside [0, 1]")));
            }
        }
        Ok(report)
    }

    /// `[acc, iou, fwiou, ts]`.
    pub fn values(&self) -> [f64; 4] {
        [self.acc, self.iou, self.fwiou, self.ts]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| file_err(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| file_err(path, e))
    }

    /// Per-AOI rows followed by the mean.
    pub fn table(&self) -> String {
        let mut rows: Vec<(String, [f64; 4])> =
            self.per_aoi.iter().map(|m| (m.aoi_id.clone(), [m.acc, m.iou, m.fwiou, m.ts])).collect();
        rows.push(("mean".into(), self.values()));
        format_table("AOI", &rows)
    }
}

/// Fixed-width table with columns Acc, IoU, FWIoU, TS.
pub fn format_table(first_column: &str, rows: &[(String, [f64; 4])]) -> String {
    let width = rows.iter().map(|r| r.0.chars().count()).chain([first_column.chars().count()]).max().unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{first_column:<width$}  {:>6}  {:>6}  {:>6}  {:>6}", "Acc", "IoU", "FWIoU", "TS");
    let _ = writeln!(out, "{}", "-".repeat(width + 32));
    for (name, v) in rows {
        let _ = writeln!(out, "{name:<width$}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}", v[0], v[1], v[2], v[3]);
    }
    out
}

/// Score every `<aoi>.geojson` in `pred_dir` against the labels of the same
/// AOI under the dataset root `label_root`. AOIs missing on either side are
/// skipped with a warning.
pub fn evaluate_run(
    pred_dir: impl AsRef<Path>,
    label_root: impl AsRef<Path>,
    metadata: BTreeMap<String, String>,
) -> Result<MetricsReport> {
    let pred_dir = pred_dir.as_ref();
    let label_root = label_root.as_ref();
    let mut predicted = Vec::new();
    for entry in std::fs::read_dir(pred_dir).map_err(|e| file_err(pred_dir, e))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "geojson") {
            if let Some(stem) = path.file_stem() {
                predicted.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    predicted.sort();
    if predicted.is_empty() {
        return Err(file_err(pred_dir, "no predicted footprints (*.geojson)"));
    }
    let labeled = list_aois(label_root)?;
    for id in &labeled {
        if !predicted.contains(id) {
            log::warn!("AOI `{id}` has labels but no prediction; skipped");
        }
    }
    let ids: Vec<String> = predicted
        .into_iter()
        .filter(|id| {
            let ok = label_root.join(id).join("labels.geojson").is_file();
            if !ok {
                log::warn!("AOI `{id}` has a prediction but no labels; skipped");
            }
            ok
        })
        .collect();
    let per_aoi = exec::map_indexed(ids.len(), |i| {
        let id = &ids[i];
        let manifest = read_manifest(label_root, id)?;
        let (h, w) = hr_frame_size(label_root, &manifest)?;
        let gt = FootprintSet::load(label_root.join(id).join("labels.geojson"))?;
        let pred = FootprintSet::load(pred_dir.join(format!("{id}.geojson")))?;
        evaluate_aoi(id, &pred, &gt, manifest.hr.len(), h, w)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_aois(per_aoi, metadata)
}
