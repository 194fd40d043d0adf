//! Generating large frames by patch: non-overlapping tiles, each generated
//! with the coordinates it occupies in the full frame, placed back without
//! blending.

use std::collections::HashSet;
use std::sync::Arc;

use hrtrack_nn::exec;
use ndarray::{s, Array3};

use crate::dataset::PairedSample;
use crate::error::{Error, Result};
use crate::raster::{CoordinateGrid, PixelSpace, RasterImage};
use crate::sr::SrModel;

/// Row-major non-overlapping `patch × patch` tiling of a frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// `(row, col)` of each tile's top-left pixel.
    pub origins: Vec<(usize, usize)>,
}

pub fn plan_tiles(height: usize, width: usize, patch: usize) -> Result<TilePlan> {
    if patch == 0 || height == 0 || width == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::Tiling(format!("{height}×{width} is not divisible into {patch}×{patch} tiles")));
    }
    let origins = (0..height / patch)
        .flat_map(|r| (0..width / patch).map(move |c| (r * patch, c * patch)))
        .collect();
    Ok(TilePlan { height, width, patch, origins })
}

impl TilePlan {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Full-frame coordinates of tile `i`'s cells.
    pub fn grid(&self, i: usize, time: f64) -> Result<CoordinateGrid> {
        let (r, c) = self.origins[i];
        CoordinateGrid::full(self.height, self.width, time).window(r, c, self.patch, self.patch)
    }

    /// Every pixel belongs to exactly one in-bounds tile.
    pub fn check(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for &(r, c) in &self.origins {
            if !seen.insert((r, c)) {
                return Err(Error::Tiling(format!("duplicate tile origin ({r}, {c})")));
            }
            if r + self.patch > self.height || c + self.patch > self.width {
                return Err(Error::Tiling(format!("tile at ({r}, {c}) leaves the frame")));
            }
        }
        let mut owner = vec![0u32; self.height * self.width];
        for &(r, c) in &self.origins {
            for rr in r..r + self.patch {
                for cc in c..c + self.patch {
                    owner[rr * self.width + cc] += 1;
                }
            }
        }
        if owner.iter().any(|&n| n != 1) {
            return Err(Error::Tiling("tiles do not cover the frame exactly once".into()));
        }
        Ok(())
    }
}

pub fn crop_tiles(img: &RasterImage, plan: &TilePlan) -> Result<Vec<RasterImage>> {
    if (img.height(), img.width()) != (plan.height, plan.width) {
        return Err(Error::Tiling(format!(
            "image is {}×{}, plan is {}×{}",
            img.height(),
            img.width(),
            plan.height,
            plan.width
        )));
    }
    plan.origins.iter().map(|&(r, c)| img.crop(r, c, plan.patch, plan.patch)).collect()
}

/// Place one tile per plan origin. Metadata comes from the first tile.
pub fn stitch(tiles: &[RasterImage], plan: &TilePlan) -> Result<RasterImage> {
    plan.check()?;
    if tiles.len() != plan.len() {
        return Err(Error::Tiling(format!("{} tiles for {} origins", tiles.len(), plan.len())));
    }
    let bands = tiles[0].bands();
    let mut out = Array3::zeros((bands, plan.height, plan.width));
    for (tile, &(r, c)) in tiles.iter().zip(&plan.origins) {
        if tile.dims() != (bands, plan.patch, plan.patch) || tile.space() != tiles[0].space() {
            return Err(Error::Tiling(format!("tile at ({r}, {c}) has shape {:?}", tile.dims())));
        }
        out.slice_mut(s![.., r..r + plan.patch, c..c + plan.patch]).assign(tile.pixels());
    }
    tiles[0].with_pixels(out)
}

/// Mean absolute jump between horizontally or vertically adjacent pixels
/// that straddle a tile boundary.
pub fn seam_discontinuity(img: &RasterImage, plan: &TilePlan) -> f64 {
    let px = img.pixels();
    let (c, h, w) = img.dims();
    let (mut sum, mut n) = (0.0, 0usize);
    for b in 0..c {
        for k in (plan.patch..w).step_by(plan.patch) {
            for r in 0..h {
                sum += (px[[b, r, k]] - px[[b, r, k - 1]]).abs();
                n += 1;
            }
        }
        for k in (plan.patch..h).step_by(plan.patch) {
            for col in 0..w {
                sum += (px[[b, k, col]] - px[[b, k - 1, col]]).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Generate a full frame tile by tile. The LR frame is resized once to the
/// reference's dimensions and then cropped alongside it, and each tile sees
/// its full-frame coordinates. Tiles run in parallel and are placed in plan
/// order.
pub fn generate_full(model: &SrModel, sample: &PairedSample, t: f64, patch: usize) -> Result<RasterImage> {
    let (h, w) = (sample.hr_reference.height(), sample.hr_reference.width());
    let plan = plan_tiles(h, w, patch)?;
    let lr_model = match sample.lr_target.space() {
        PixelSpace::Model => (*sample.lr_target).clone(),
        PixelSpace::Storage => sample.lr_target.to_model_space()?,
    };
    let lr_full = lr_model.resize_to(h, w)?;
    let lr_tiles = crop_tiles(&lr_full, &plan)?;
    let hr_tiles = crop_tiles(&sample.hr_reference, &plan)?;
    let tiles = exec::map_indexed(plan.len(), |i| {
        let tile_sample = PairedSample {
            lr_target: Arc::new(lr_tiles[i].clone()),
            hr_reference: Arc::new(hr_tiles[i].clone()),
            hr_target: None,
            ..sample.clone()
        };
        let grid = plan.grid(i, t)?;
        model.generate_any(&tile_sample, &grid, t)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let out = stitch(&tiles, &plan)?;
    if plan.len() > 1 {
        log::debug!("seam discontinuity {:.5} over {} tiles", seam_discontinuity(&out, &plan), plan.len());
    }
    Ok(out)
}
