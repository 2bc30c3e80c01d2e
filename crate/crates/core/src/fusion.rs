//! Confidence-weighted fusion of conditional features with the warped
//! exemplar.
//!
//! Confidence lives on the block grid and is spread to sites by
//! nearest-neighbor upsampling: every site takes its covering block's value.
//! Mixing is `x · (1 - c) + w · c`, evaluated in `f64` and rounded once, so
//! `c = 0` and `c = 1` return the inputs bit-exactly and every output stays
//! between its two inputs.

use crate::error::{Error, Result};
use crate::ras::BlockRanking;
use crate::tensor::FeatureGrid;

/// Per-block confidence in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    blocks_h: usize,
    blocks_w: usize,
    values: Vec<f32>,
}

impl ConfidenceMap {
    pub fn new(blocks_h: usize, blocks_w: usize, values: Vec<f32>) -> Result<Self> {
        if blocks_h == 0 || blocks_w == 0 || values.len() != blocks_h * blocks_w {
            return Err(Error::InvalidShape(format!(
                "{} confidence values for a {blocks_h}×{blocks_w} block grid",
                values.len()
            )));
        }
        check_unit_range(&values)?;
        Ok(Self { blocks_h, blocks_w, values })
    }

    /// Reads a single-channel grid as a confidence map.
    pub fn from_grid(grid: &FeatureGrid) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::mismatch(format!("confidence map needs 1 channel, got {}", grid.channels())));
        }
        Self::new(grid.height(), grid.width(), grid.data().to_vec())
    }

    pub fn blocks_h(&self) -> usize {
        self.blocks_h
    }

    pub fn blocks_w(&self) -> usize {
        self.blocks_w
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, by: usize, bx: usize) -> f32 {
        self.values[by * self.blocks_w + bx]
    }

    pub fn to_grid(&self) -> FeatureGrid {
        FeatureGrid::new(self.blocks_h, self.blocks_w, 1, self.values.clone()).expect("validated at construction")
    }
}

/// Per-block, per-channel confidence in `[0, 1]`, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelMap(FeatureGrid);

impl MultiChannelMap {
    pub fn new(grid: FeatureGrid) -> Result<Self> {
        check_unit_range(grid.data())?;
        Ok(Self(grid))
    }

    /// Every channel set to `cmap`.
    pub fn replicate(cmap: &ConfidenceMap, channels: usize) -> Result<Self> {
        let grid = FeatureGrid::from_fn(cmap.blocks_h, cmap.blocks_w, channels, |y, x, _| cmap.at(y, x))?;
        Ok(Self(grid))
    }

    pub fn channels(&self) -> usize {
        self.0.channels()
    }

    pub fn grid(&self) -> &FeatureGrid {
        &self.0
    }
}

fn check_unit_range(values: &[f32]) -> Result<()> {
    if let Some(index) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::param(format!("confidence value {} at index {index} outside [0, 1]", values[index])));
    }
    Ok(())
}

/// `clamp(peak cosine, 0, 1)` for every query block.
pub fn confidence_map(ranking: &BlockRanking) -> ConfidenceMap {
    let p = ranking.query_partition();
    let values = ranking.peaks().iter().map(|&c| c.clamp(0.0, 1.0) as f32).collect();
    ConfidenceMap { blocks_h: p.blocks_h(), blocks_w: p.blocks_w(), values }
}

/// `x · (1 - c) + w · c` in `f64`, rounded once.
pub fn mix(x: f32, w: f32, c: f32) -> f32 {
    let c = c as f64;
    (x as f64 * (1.0 - c) + w as f64 * c) as f32
}

/// Block size that maps the `blocks_h × blocks_w` grid onto the features.
fn upsample_factor(grid: &FeatureGrid, blocks_h: usize, blocks_w: usize) -> Result<(usize, usize)> {
    if !grid.height().is_multiple_of(blocks_h) || !grid.width().is_multiple_of(blocks_w) {
        return Err(Error::mismatch(format!(
            "{}×{} block map does not tile {}×{} features",
            blocks_h,
            blocks_w,
            grid.height(),
            grid.width()
        )));
    }
    Ok((grid.height() / blocks_h, grid.width() / blocks_w))
}

fn check_pair(conditional: &FeatureGrid, warped: &FeatureGrid) -> Result<()> {
    if !conditional.same_shape(warped) {
        return Err(Error::mismatch(format!(
            "conditional is {}×{}×{}, warped {}×{}×{}",
            conditional.height(),
            conditional.width(),
            conditional.channels(),
            warped.height(),
            warped.width(),
            warped.channels()
        )));
    }
    Ok(())
}

pub fn fuse(conditional: &FeatureGrid, warped: &FeatureGrid, cmap: &ConfidenceMap) -> Result<FeatureGrid> {
    check_pair(conditional, warped)?;
    let (sy, sx) = upsample_factor(conditional, cmap.blocks_h, cmap.blocks_w)?;
    FeatureGrid::from_fn(conditional.height(), conditional.width(), conditional.channels(), |y, x, c| {
        mix(conditional.feature_at(y, x)[c], warped.feature_at(y, x)[c], cmap.at(y / sy, x / sx))
    })
}

pub fn fuse_multichannel(conditional: &FeatureGrid, warped: &FeatureGrid, mmap: &MultiChannelMap) -> Result<FeatureGrid> {
    check_pair(conditional, warped)?;
    if mmap.channels() != conditional.channels() {
        return Err(Error::mismatch(format!(
            "confidence map has {} channels, features {}",
            mmap.channels(),
            conditional.channels()
        )));
    }
    let (sy, sx) = upsample_factor(conditional, mmap.0.height(), mmap.0.width())?;
    FeatureGrid::from_fn(conditional.height(), conditional.width(), conditional.channels(), |y, x, c| {
        mix(conditional.feature_at(y, x)[c], warped.feature_at(y, x)[c], mmap.0.feature_at(y / sy, x / sx)[c])
    })
}
