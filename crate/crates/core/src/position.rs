//! Coordinate channels appended to feature grids.
//!
//! The vanilla encoding uses one frame for the whole image. The semantic
//! encoding gives every label its own frame: the origin sits at the center
//! of the label's bounding box and each axis is divided by the box's
//! half-extent, so every region spans `[-1, 1]` regardless of where it sits
//! in the image. Sites sharing a label form one region even when they are
//! not connected.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{FeatureGrid, LabelMask};

/// `H × W × 2` grid of `(x, y)` coordinates in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionChannels(FeatureGrid);

impl PositionChannels {
    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    /// `(x, y)` at site `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let v = self.0.feature_at(y, x);
        (v[0], v[1])
    }

    pub fn grid(&self) -> &FeatureGrid {
        &self.0
    }

    pub fn into_grid(self) -> FeatureGrid {
        self.0
    }
}

/// Position of `pos` in the frame spanning `lo..=hi`, mapped to `[-1, 1]`.
/// A zero-width frame maps to 0.
fn axis_coord(pos: usize, lo: usize, hi: usize) -> f32 {
    if hi == lo {
        return 0.0;
    }
    let center = (lo + hi) as f64 / 2.0;
    let half = (hi - lo) as f64 / 2.0;
    ((pos as f64 - center) / half) as f32
}

pub fn vanilla_pe(height: usize, width: usize) -> Result<PositionChannels> {
    let grid = FeatureGrid::from_fn(height, width, 2, |y, x, c| match c {
        0 => axis_coord(x, 0, width - 1),
        _ => axis_coord(y, 0, height - 1),
    })?;
    Ok(PositionChannels(grid))
}

#[derive(Clone, Copy)]
struct Bounds {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

pub fn semantic_pe(mask: &LabelMask) -> Result<PositionChannels> {
    let (h, w) = (mask.height(), mask.width());
    let mut bounds: BTreeMap<u32, Bounds> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            bounds
                .entry(mask.label_at(y, x))
                .and_modify(|b| {
                    b.y0 = b.y0.min(y);
                    b.y1 = b.y1.max(y);
                    b.x0 = b.x0.min(x);
                    b.x1 = b.x1.max(x);
                })
                .or_insert(Bounds { y0: y, y1: y, x0: x, x1: x });
        }
    }
    let grid = FeatureGrid::from_fn(h, w, 2, |y, x, c| {
        let b = bounds[&mask.label_at(y, x)];
        match c {
            0 => axis_coord(x, b.x0, b.x1),
            _ => axis_coord(y, b.y0, b.y1),
        }
    })?;
    Ok(PositionChannels(grid))
}

/// Appends the two position channels, scaled by `weight`, after the features.
pub fn append_position(grid: &FeatureGrid, channels: &PositionChannels, weight: f32) -> Result<FeatureGrid> {
    if (grid.height(), grid.width()) != (channels.height(), channels.width()) {
        return Err(Error::mismatch(format!(
            "features are {}×{}, position channels {}×{}",
            grid.height(),
            grid.width(),
            channels.height(),
            channels.width()
        )));
    }
    if !weight.is_finite() {
        return Err(Error::param(format!("position weight must be finite, got {weight}")));
    }
    let d = grid.channels();
    FeatureGrid::from_fn(grid.height(), grid.width(), d + 2, |y, x, c| {
        if c < d {
            grid.feature_at(y, x)[c]
        } else {
            channels.0.feature_at(y, x)[c - d] * weight
        }
    })
}
