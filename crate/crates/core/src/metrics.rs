//! Alignment losses that need no trained network.

use crate::correspondence::SparseCorrespondence;
use crate::error::{Error, Result};
use crate::tensor::FeatureGrid;

/// Mean absolute difference between `Tᵀ(T · Z)` and `Z`.
///
/// `Tᵀ` reuses the stored entries transposed, with each exemplar row
/// renormalized to sum to 1. Exemplar sites that no query references have
/// no mass to renormalize; they map to the zero vector.
pub fn cycle_loss(correspondence: &SparseCorrespondence, exemplar: &FeatureGrid) -> Result<f64> {
    let warped = correspondence.warp(exemplar)?;
    let d = exemplar.channels();
    let n = exemplar.sites();
    let mut back = vec![0.0f64; n * d];
    let mut mass = vec![0.0f64; n];
    for q in 0..correspondence.rows() {
        let feature = warped.feature(q);
        for (e, w) in correspondence.row(q) {
            let w = w as f64;
            mass[e] += w;
            for (b, &v) in back[e * d..(e + 1) * d].iter_mut().zip(feature) {
                *b += w * v as f64;
            }
        }
    }
    let mut total = 0.0;
    for e in 0..n {
        let z = exemplar.feature(e);
        for (c, &b) in back[e * d..(e + 1) * d].iter().enumerate() {
            let recovered = if mass[e] > 0.0 { b / mass[e] } else { 0.0 };
            total += (recovered - z[c] as f64).abs();
        }
    }
    Ok(total / (n * d) as f64)
}

/// Mean absolute elementwise difference.
pub fn consistency_loss(a: &FeatureGrid, b: &FeatureGrid) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::mismatch(format!(
            "{}×{}×{} vs {}×{}×{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    let total: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    Ok(total / a.data().len() as f64)
}
