//! Feature grids, label masks and the `FTN1` binary tensor format.
//!
//! File layout (all integers little-endian):
//!
//! | field   | size            | value                           |
//! |---------|-----------------|---------------------------------|
//! | magic   | 4               | `b"FTN1"`                       |
//! | dtype   | 1               | `1` = f32, `2` = u32            |
//! | ndim    | 1               | number of dimensions            |
//! | dims    | 4 · ndim        | u32 per dimension               |
//! | payload | 4 · prod(dims)  | row-major values                |
//!
//! Feature grids are stored as `(H, W, d)`, label masks as `(H, W)`. A
//! two-dimensional f32 tensor reads back as a single-channel grid.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FTN1";
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_U32: u8 = 2;

/// Norm guard used for cosine similarity everywhere in the crate.
pub const NORM_EPSILON: f32 = 1e-8;

/// An `H × W × d` grid of finite `f32` feature vectors stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidShape(format!(
                "feature grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::InvalidShape(format!(
                "{height}x{width}x{channels} grid needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    /// Builds a grid by evaluating `f(y, x, c)` at every element.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of spatial sites, `H · W`.
    pub fn sites(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Feature vector at flat site index `y · W + x`.
    pub fn feature(&self, site: usize) -> &[f32] {
        let d = self.channels;
        &self.data[site * d..(site + 1) * d]
    }

    pub fn feature_at(&self, y: usize, x: usize) -> &[f32] {
        self.feature(y * self.width + x)
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Copies channels `range` of every site into a new grid.
    pub fn select_channels(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.channels {
            return Err(Error::param(format!(
                "channel range {range:?} invalid for {} channels",
                self.channels
            )));
        }
        let mut data = Vec::with_capacity(self.sites() * range.len());
        for site in 0..self.sites() {
            data.extend_from_slice(&self.feature(site)[range.clone()]);
        }
        Self::new(self.height, self.width, range.len(), data)
    }
}

/// An `H × W` grid of region labels. Distinct values are distinct regions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!(
                "label mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "{height}x{width} mask needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label_at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

/// Either payload kind an `FTN1` file can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    Features(FeatureGrid),
    Labels(LabelMask),
}

impl Tensor {
    pub fn into_features(self) -> Result<FeatureGrid> {
        match self {
            Tensor::Features(g) => Ok(g),
            Tensor::Labels(_) => Err(Error::mismatch("expected an f32 feature tensor, found u32 labels")),
        }
    }

    pub fn into_labels(self) -> Result<LabelMask> {
        match self {
            Tensor::Labels(m) => Ok(m),
            Tensor::Features(_) => Err(Error::mismatch("expected a u32 label tensor, found f32 features")),
        }
    }
}

impl From<FeatureGrid> for Tensor {
    fn from(g: FeatureGrid) -> Self {
        Tensor::Features(g)
    }
}

impl From<LabelMask> for Tensor {
    fn from(m: LabelMask) -> Self {
        Tensor::Labels(m)
    }
}

/// Serializes a tensor into its exact `FTN1` byte representation.
pub fn encode(tensor: &Tensor) -> Result<Vec<u8>> {
    let (dtype, dims, count) = match tensor {
        Tensor::Features(g) => {
            if let Some(index) = g.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index });
            }
            (DTYPE_F32, vec![g.height, g.width, g.channels], g.data.len())
        }
        Tensor::Labels(m) => (DTYPE_U32, vec![m.height, m.width], m.labels.len()),
    };
    let mut out = Vec::with_capacity(6 + 4 * dims.len() + 4 * count);
    out.extend_from_slice(&MAGIC);
    out.push(dtype);
    out.push(dims.len() as u8);
    for &d in &dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidShape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match tensor {
        Tensor::Features(g) => g.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Tensor::Labels(m) => m.labels.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

/// Parses `FTN1` bytes. Rejects any length mismatch.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 6 {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(Error::BadMagic { found: bytes[..4].try_into().unwrap() });
        }
        return Err(Error::Truncated { expected: 6, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let dtype = bytes[4];
    if dtype != DTYPE_F32 && dtype != DTYPE_U32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let ndim = bytes[5] as usize;
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Truncated { expected: header, found: bytes.len() });
    }
    let dims: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidShape(format!("dims {dims:?} overflow")))?;
    let expected = count
        .checked_mul(4)
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| Error::InvalidShape(format!("dims {dims:?} overflow")))?;
    if bytes.len() < expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes { extra: bytes.len() - expected });
    }
    let words = bytes[header..].chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap());

    match dtype {
        DTYPE_F32 => {
            let data: Vec<f32> = words.map(f32::from_le_bytes).collect();
            let (h, w, c) = match dims[..] {
                [h, w, c] => (h, w, c),
                [h, w] => (h, w, 1),
                _ => {
                    return Err(Error::InvalidShape(format!(
                        "f32 tensors must have 2 or 3 dims, got {ndim}"
                    )))
                }
            };
            FeatureGrid::new(h, w, c, data).map(Tensor::Features)
        }
        _ => {
            let labels: Vec<u32> = words.map(u32::from_le_bytes).collect();
            match dims[..] {
                [h, w] => LabelMask::new(h, w, labels).map(Tensor::Labels),
                _ => Err(Error::InvalidShape(format!("u32 tensors must have 2 dims, got {ndim}"))),
            }
        }
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(tensor)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Scales every site's feature vector to unit L2 norm.
///
/// Vectors whose norm is below `epsilon` become zero vectors, which keeps
/// the map idempotent.
pub fn l2_normalize_features(grid: &FeatureGrid, epsilon: f32) -> FeatureGrid {
    let d = grid.channels;
    let mut data = grid.data.clone();
    for v in data.chunks_exact_mut(d) {
        normalize_in_place(v, epsilon);
    }
    FeatureGrid { data, ..*grid }
}

pub(crate) fn normalize_in_place(v: &mut [f32], epsilon: f32) {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm < epsilon as f64 {
        v.fill(0.0);
        return;
    }
    for x in v.iter_mut() {
        *x = (*x as f64 / norm) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_of_single_element_grid() {
        let g = FeatureGrid::new(1, 1, 1, vec![0.0]).unwrap();
        let bytes = encode(&g.into()).unwrap();
        assert_eq!(bytes.len(), 22);
        assert_eq!(&bytes[..4], b"FTN1");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 3);
        assert_eq!(&bytes[6..18], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
    }

    #[test]
    fn roundtrip_small_grid() {
        let g = FeatureGrid::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = Tensor::from(g.clone());
        assert_eq!(decode(&encode(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn roundtrip_mask() {
        let m = LabelMask::new(3, 3, vec![0, 7, 7, 1, 1, 9, 2, 2, 2]).unwrap();
        let t = Tensor::from(m);
        assert_eq!(decode(&encode(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode(&FeatureGrid::zeros(1, 1, 1).unwrap().into()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn rejects_bad_dtype() {
        let mut bytes = encode(&FeatureGrid::zeros(1, 1, 1).unwrap().into()).unwrap();
        bytes[4] = 3;
        assert!(matches!(decode(&bytes), Err(Error::UnsupportedDtype(3))));
    }

    #[test]
    fn rejects_truncated_and_trailing() {
        let bytes = encode(&FeatureGrid::zeros(2, 2, 2).unwrap().into()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(decode(&bytes[..8]), Err(Error::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::TrailingBytes { extra: 1 })));
    }

    #[test]
    fn rejects_non_finite_payload() {
        let mut bytes = encode(&FeatureGrid::zeros(1, 2, 1).unwrap().into()).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::NonFinite { index: 1 })));
    }

    #[test]
    fn nan_rejected_before_write() {
        assert!(matches!(FeatureGrid::new(1, 1, 1, vec![f32::NAN]), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn normalize_examples() {
        let g = FeatureGrid::new(1, 3, 2, vec![3.0, 4.0, 0.0, 0.0, 0.6, 0.8]).unwrap();
        let n = l2_normalize_features(&g, NORM_EPSILON);
        let expected = [0.6, 0.8, 0.0, 0.0, 0.6, 0.8];
        for (a, b) in n.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
