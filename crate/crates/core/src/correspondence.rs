//! Row-stochastic correspondence from query sites to exemplar sites, and
//! warping of exemplar features through it.
//!
//! Rows are indexed by flat query site `y · W + x`. Weights are `f32`; the
//! block scheme stores a column index next to each weight, the dense
//! baseline stores all `L_query × L_exemplar` weights with implicit columns.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ras::{dot, softmax_into, try_buffer};
use crate::tensor::{l2_normalize_features, FeatureGrid, NORM_EPSILON};

#[derive(Clone, Debug, PartialEq)]
enum Layout {
    /// `per_row` explicit entries per row.
    Fixed { per_row: usize, columns: Vec<u32> },
    /// One entry per exemplar site, columns implicit.
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseCorrespondence {
    query_height: usize,
    query_width: usize,
    exemplar_sites: usize,
    layout: Layout,
    weights: Vec<f32>,
}

impl SparseCorrespondence {
    pub(crate) fn fixed(
        query_height: usize,
        query_width: usize,
        exemplar_sites: usize,
        per_row: usize,
        columns: Vec<u32>,
        weights: Vec<f32>,
    ) -> Result<Self> {
        let rows = query_height * query_width;
        if columns.len() != rows * per_row || weights.len() != columns.len() {
            return Err(Error::mismatch(format!(
                "{rows} rows of {per_row} entries need {} slots, got {} columns and {} weights",
                rows * per_row,
                columns.len(),
                weights.len()
            )));
        }
        if let Some(&c) = columns.iter().find(|&&c| c as usize >= exemplar_sites) {
            return Err(Error::IndexOutOfRange { index: c as usize, len: exemplar_sites });
        }
        Ok(Self { query_height, query_width, exemplar_sites, layout: Layout::Fixed { per_row, columns }, weights })
    }

    /// Builds a correspondence from explicit per-row `(exemplar site, weight)`
    /// lists, each of the same length.
    pub fn from_rows(
        query_height: usize,
        query_width: usize,
        exemplar_sites: usize,
        rows: &[Vec<(u32, f32)>],
    ) -> Result<Self> {
        if rows.len() != query_height * query_width {
            return Err(Error::mismatch(format!(
                "{} rows given for a {query_height}×{query_width} query",
                rows.len()
            )));
        }
        let per_row = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != per_row) {
            return Err(Error::mismatch("rows have different lengths"));
        }
        if let Some(&(_, w)) = rows.iter().flatten().find(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::param(format!("weights must be finite and nonnegative, got {w}")));
        }
        let columns = rows.iter().flatten().map(|&(c, _)| c).collect();
        let weights = rows.iter().flatten().map(|&(_, w)| w).collect();
        Self::fixed(query_height, query_width, exemplar_sites, per_row, columns, weights)
    }

    pub fn query_height(&self) -> usize {
        self.query_height
    }

    pub fn query_width(&self) -> usize {
        self.query_width
    }

    pub fn rows(&self) -> usize {
        self.query_height * self.query_width
    }

    pub fn exemplar_sites(&self) -> usize {
        self.exemplar_sites
    }

    pub fn is_dense(&self) -> bool {
        self.layout == Layout::Dense
    }

    /// Stored weight entries.
    pub fn entries(&self) -> usize {
        self.weights.len()
    }

    /// Entries per row.
    pub fn row_len(&self) -> usize {
        match &self.layout {
            Layout::Fixed { per_row, .. } => *per_row,
            Layout::Dense => self.exemplar_sites,
        }
    }

    /// `(exemplar site, weight)` pairs of row `q`.
    pub fn row(&self, q: usize) -> impl Iterator<Item = (usize, f32)> + '_ {
        let n = self.row_len();
        let weights = &self.weights[q * n..(q + 1) * n];
        let columns = match &self.layout {
            Layout::Fixed { columns, .. } => Some(&columns[q * n..(q + 1) * n]),
            Layout::Dense => None,
        };
        weights.iter().enumerate().map(move |(slot, &w)| (columns.map_or(slot, |c| c[slot] as usize), w))
    }

    /// Exemplar site with the largest weight in row `q`; ties go to the
    /// earlier entry.
    pub fn argmax(&self, q: usize) -> usize {
        let mut best = (usize::MAX, f32::NEG_INFINITY);
        for (e, w) in self.row(q) {
            if w > best.1 {
                best = (e, w);
            }
        }
        best.0
    }

    /// `T · Z`: each query site receives the weighted sum of its exemplar
    /// features.
    pub fn warp(&self, exemplar: &FeatureGrid) -> Result<FeatureGrid> {
        self.warp_with(exemplar, false)
    }

    pub fn warp_with(&self, exemplar: &FeatureGrid, parallel: bool) -> Result<FeatureGrid> {
        if exemplar.sites() != self.exemplar_sites {
            return Err(Error::mismatch(format!(
                "exemplar has {} sites, correspondence expects {}",
                exemplar.sites(),
                self.exemplar_sites
            )));
        }
        let d = exemplar.channels();
        let mut out = vec![0.0f32; self.rows() * d];
        let warp_row = |(q, dst): (usize, &mut [f32])| {
            let mut acc = vec![0.0f64; d];
            for (e, w) in self.row(q) {
                for (a, &z) in acc.iter_mut().zip(exemplar.feature(e)) {
                    *a += w as f64 * z as f64;
                }
            }
            for (o, a) in dst.iter_mut().zip(acc) {
                *o = a as f32;
            }
        };
        if parallel {
            out.par_chunks_mut(d).enumerate().for_each(warp_row);
        } else {
            out.chunks_mut(d).enumerate().for_each(warp_row);
        }
        FeatureGrid::new(self.query_height, self.query_width, d, out)
    }

    /// Writes `query_index,exemplar_index,weight` lines, header first.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["query_index", "exemplar_index", "weight"])?;
        for q in 0..self.rows() {
            for (e, w) in self.row(q) {
                csv.serialize((q, e, w))?;
            }
        }
        csv.flush()?;
        Ok(())
    }
}

/// Full softmax over `cos / tau` from every query site to every exemplar site.
///
/// Fails with [`Error::Allocation`] if the `L_query × L_exemplar` weight
/// buffer cannot be reserved.
pub fn dense_correspondence(
    query: &FeatureGrid,
    exemplar: &FeatureGrid,
    tau: f64,
    parallel: bool,
) -> Result<SparseCorrespondence> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::param(format!("tau must be positive, got {tau}")));
    }
    if query.channels() != exemplar.channels() {
        return Err(Error::mismatch(format!(
            "query has {} channels, exemplar {}",
            query.channels(),
            exemplar.channels()
        )));
    }
    let n = exemplar.sites();
    let entries = query.sites().checked_mul(n).ok_or(Error::Allocation { bytes: usize::MAX })?;
    let mut weights = try_buffer::<f32>(entries)?;
    weights.resize(entries, 0.0);
    let xq = l2_normalize_features(query, NORM_EPSILON);
    let ze = l2_normalize_features(exemplar, NORM_EPSILON);
    let fill = |(q, row): (usize, &mut [f32])| {
        let x = xq.feature(q);
        let logits: Vec<f64> = (0..n).map(|e| dot(x, ze.feature(e)) / tau).collect();
        softmax_into(&logits, row);
    };
    if parallel {
        weights.par_chunks_mut(n).enumerate().for_each(fill);
    } else {
        weights.chunks_mut(n).enumerate().for_each(fill);
    }
    Ok(SparseCorrespondence {
        query_height: query.height(),
        query_width: query.width(),
        exemplar_sites: n,
        layout: Layout::Dense,
        weights,
    })
}
