//! Two-level block correspondence: rank exemplar blocks for every query
//! block with the soft top-k operator, then attend densely to the features
//! inside the retrieved blocks.
//!
//! Blocks are `s × s` tiles laid out in raster order; sites inside a block
//! are also in raster order, so a block's vector is the concatenation of its
//! `b = s²` member features. Block similarity is the cosine between these
//! concatenations.
//!
//! The ranking stage scores every `(query block, exemplar block)` pair but
//! keeps only one score row alive at a time, so its memory is linear in the
//! number of blocks. Only `k` candidates and their `γ` survive per query
//! block.

use rayon::prelude::*;

use crate::correspondence::SparseCorrespondence;
use crate::error::{Error, Result};
use crate::sinkhorn::{soft_topk_gamma, top_k_indices, TopKConfig};
use crate::tensor::{l2_normalize_features, normalize_in_place, FeatureGrid, NORM_EPSILON};

/// Full score rows are kept on the ranking when there are at most this many
/// exemplar blocks.
pub const DEBUG_ROW_LIMIT: usize = 64;

/// Tiling of an `H × W` grid into `s × s` blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockPartition {
    height: usize,
    width: usize,
    block_side: usize,
}

impl BlockPartition {
    pub fn new(height: usize, width: usize, block_side: usize) -> Result<Self> {
        if block_side == 0 {
            return Err(Error::param("block side must be positive"));
        }
        if height == 0 || width == 0 || !height.is_multiple_of(block_side) || !width.is_multiple_of(block_side) {
            return Err(Error::InvalidShape(format!(
                "{height}×{width} grid is not divisible into {block_side}×{block_side} blocks"
            )));
        }
        Ok(Self { height, width, block_side })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn block_side(&self) -> usize {
        self.block_side
    }

    /// Sites per block, `b = s²`.
    pub fn block_len(&self) -> usize {
        self.block_side * self.block_side
    }

    pub fn blocks_h(&self) -> usize {
        self.height / self.block_side
    }

    pub fn blocks_w(&self) -> usize {
        self.width / self.block_side
    }

    /// Number of blocks `N = L / b`.
    pub fn blocks(&self) -> usize {
        self.blocks_h() * self.blocks_w()
    }

    /// Number of sites `L = H · W`.
    pub fn sites(&self) -> usize {
        self.height * self.width
    }

    /// `(block index, offset within block)` of site `(y, x)`.
    pub fn locate(&self, y: usize, x: usize) -> (usize, usize) {
        let s = self.block_side;
        ((y / s) * self.blocks_w() + x / s, (y % s) * s + x % s)
    }

    /// Flat site index `y · W + x` of `offset` inside `block`.
    pub fn site(&self, block: usize, offset: usize) -> usize {
        let s = self.block_side;
        let y = (block / self.blocks_w()) * s + offset / s;
        let x = (block % self.blocks_w()) * s + offset % s;
        y * self.width + x
    }

    /// Member sites of `block` in offset order.
    pub fn block_sites(&self, block: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.block_len()).map(move |o| self.site(block, o))
    }
}

/// Concatenated member features of every block, raw and unit-normalized.
#[derive(Clone, Debug)]
pub struct BlockFeatures {
    partition: BlockPartition,
    dim: usize,
    raw: Vec<f32>,
    normalized: Vec<f32>,
}

impl BlockFeatures {
    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    /// Block vector length `b · d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.partition.blocks()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block(&self, i: usize) -> &[f32] {
        &self.raw[i * self.dim..(i + 1) * self.dim]
    }

    pub fn normalized_block(&self, i: usize) -> &[f32] {
        &self.normalized[i * self.dim..(i + 1) * self.dim]
    }

    /// Cosine similarity of query block `i` here and block `j` of `other`.
    pub fn cosine(&self, i: usize, other: &BlockFeatures, j: usize) -> f64 {
        dot(self.normalized_block(i), other.normalized_block(j))
    }
}

pub fn partition_blocks(grid: &FeatureGrid, block_side: usize) -> Result<(BlockPartition, BlockFeatures)> {
    let partition = BlockPartition::new(grid.height(), grid.width(), block_side)?;
    let d = grid.channels();
    let dim = partition.block_len() * d;
    let mut raw = Vec::with_capacity(partition.blocks() * dim);
    for block in 0..partition.blocks() {
        for site in partition.block_sites(block) {
            raw.extend_from_slice(grid.feature(site));
        }
    }
    let mut normalized = raw.clone();
    for v in normalized.chunks_exact_mut(dim) {
        normalize_in_place(v, NORM_EPSILON);
    }
    Ok((partition, BlockFeatures { partition, dim, raw, normalized }))
}

/// Retrieved exemplar blocks for every query block.
#[derive(Clone, Debug)]
pub struct BlockRanking {
    query: BlockPartition,
    exemplar: BlockPartition,
    k: usize,
    /// `k` exemplar block indices per query block, ascending.
    candidates: Vec<u32>,
    /// `γ` of each candidate, aligned with `candidates`.
    gamma: Vec<f64>,
    /// Largest cosine against any exemplar block.
    peak: Vec<f64>,
    rows: Option<Vec<f64>>,
    iterations: Vec<u32>,
    marginal_errors: Vec<f64>,
}

impl BlockRanking {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn query_partition(&self) -> &BlockPartition {
        &self.query
    }

    pub fn exemplar_partition(&self) -> &BlockPartition {
        &self.exemplar
    }

    pub fn query_blocks(&self) -> usize {
        self.query.blocks()
    }

    pub fn candidates(&self, i: usize) -> &[u32] {
        &self.candidates[i * self.k..(i + 1) * self.k]
    }

    pub fn gammas(&self, i: usize) -> &[f64] {
        &self.gamma[i * self.k..(i + 1) * self.k]
    }

    pub fn peak(&self, i: usize) -> f64 {
        self.peak[i]
    }

    pub fn peaks(&self) -> &[f64] {
        &self.peak
    }

    /// All block scores of query block `i`, kept only for small exemplars.
    pub fn score_row(&self, i: usize) -> Option<&[f64]> {
        let n = self.exemplar.blocks();
        self.rows.as_ref().map(|r| &r[i * n..(i + 1) * n])
    }

    /// Solver steps spent on each query block.
    pub fn iterations(&self) -> &[u32] {
        &self.iterations
    }

    /// Final row-marginal violation of each query block's plan.
    pub fn marginal_errors(&self) -> &[f64] {
        &self.marginal_errors
    }

    /// Block pairs scored: `N_query · N_exemplar`.
    pub fn ranking_scores(&self) -> usize {
        self.query.blocks() * self.exemplar.blocks()
    }
}

struct RankedBlock {
    candidates: Vec<u32>,
    gamma: Vec<f64>,
    peak: f64,
    row: Option<Vec<f64>>,
    iterations: u32,
    marginal_error: f64,
}

/// Ranks exemplar blocks for each query block and keeps the `k` largest `γ`.
pub fn rank_blocks(
    query: &BlockFeatures,
    exemplar: &BlockFeatures,
    k: usize,
    config: &TopKConfig,
    parallel: bool,
) -> Result<BlockRanking> {
    config.validate()?;
    if query.dim != exemplar.dim {
        return Err(Error::mismatch(format!(
            "query blocks have dimension {}, exemplar blocks {}",
            query.dim, exemplar.dim
        )));
    }
    let n = exemplar.len();
    if k == 0 || k > n {
        return Err(Error::param(format!("k = {k} outside 1..={n} exemplar blocks")));
    }
    let keep_rows = n <= DEBUG_ROW_LIMIT;
    let rank_one = |i: usize| -> RankedBlock {
        let scores: Vec<f64> = (0..n).map(|j| query.cosine(i, exemplar, j).clamp(-1.0, 1.0)).collect();
        let peak = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (gamma, iterations, marginal_error) = soft_topk_gamma(&scores, k, config);
        let mut picked = top_k_indices(&gamma, k);
        picked.sort_unstable();
        RankedBlock {
            candidates: picked.iter().map(|&j| j as u32).collect(),
            gamma: picked.iter().map(|&j| gamma[j]).collect(),
            peak,
            row: keep_rows.then_some(scores),
            iterations: iterations as u32,
            marginal_error,
        }
    };
    let ranked: Vec<RankedBlock> = if parallel {
        (0..query.len()).into_par_iter().map(rank_one).collect()
    } else {
        (0..query.len()).map(rank_one).collect()
    };

    let mut out = BlockRanking {
        query: query.partition,
        exemplar: exemplar.partition,
        k,
        candidates: Vec::with_capacity(ranked.len() * k),
        gamma: Vec::with_capacity(ranked.len() * k),
        peak: Vec::with_capacity(ranked.len()),
        rows: keep_rows.then(|| Vec::with_capacity(ranked.len() * n)),
        iterations: Vec::with_capacity(ranked.len()),
        marginal_errors: Vec::with_capacity(ranked.len()),
    };
    for r in ranked {
        out.candidates.extend(r.candidates);
        out.gamma.extend(r.gamma);
        out.peak.push(r.peak);
        if let (Some(rows), Some(row)) = (out.rows.as_mut(), r.row) {
            rows.extend(row);
        }
        out.iterations.push(r.iterations);
        out.marginal_errors.push(r.marginal_error);
    }
    Ok(out)
}

/// Attention of every query feature over the features of its query block's
/// candidate blocks.
///
/// The weight from query site `q` (block `i`) to exemplar site `e` (block `j`)
/// is proportional to `γ_ij · exp(cos(x_q, z_e) / tau)`. Candidates are
/// enumerated by ascending block index, then offset.
pub fn block_attention(
    ranking: &BlockRanking,
    query: &FeatureGrid,
    exemplar: &FeatureGrid,
    tau: f64,
    parallel: bool,
) -> Result<SparseCorrespondence> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::param(format!("tau must be positive, got {tau}")));
    }
    let qp = ranking.query;
    let ep = ranking.exemplar;
    if (query.height(), query.width()) != (qp.height, qp.width) {
        return Err(Error::mismatch(format!(
            "query grid is {}×{}, ranking was built for {}×{}",
            query.height(),
            query.width(),
            qp.height,
            qp.width
        )));
    }
    if (exemplar.height(), exemplar.width()) != (ep.height, ep.width) {
        return Err(Error::mismatch(format!(
            "exemplar grid is {}×{}, ranking was built for {}×{}",
            exemplar.height(),
            exemplar.width(),
            ep.height,
            ep.width
        )));
    }
    if query.channels() != exemplar.channels() {
        return Err(Error::mismatch(format!(
            "query has {} channels, exemplar {}",
            query.channels(),
            exemplar.channels()
        )));
    }
    if qp.block_len() != ep.block_len() {
        return Err(Error::mismatch("query and exemplar use different block sizes"));
    }

    let b = qp.block_len();
    let per_row = ranking.k * b;
    let entries = qp.sites() * per_row;
    let mut weights = try_buffer::<f32>(entries)?;
    let mut columns = try_buffer::<u32>(entries)?;
    weights.resize(entries, 0.0);
    columns.resize(entries, 0);

    let xq = l2_normalize_features(query, NORM_EPSILON);
    let ze = l2_normalize_features(exemplar, NORM_EPSILON);
    let s = qp.block_side;
    let band = s * qp.width * per_row;

    let fill_band = |(by, (w_band, c_band)): (usize, (&mut [f32], &mut [u32]))| {
        let mut logits = vec![0.0f64; per_row];
        for r in 0..s {
            let y = by * s + r;
            for x in 0..qp.width {
                let (block, _) = qp.locate(y, x);
                let row_start = (r * qp.width + x) * per_row;
                let w_row = &mut w_band[row_start..row_start + per_row];
                let c_row = &mut c_band[row_start..row_start + per_row];
                let feature = xq.feature_at(y, x);
                let mut slot = 0;
                for (&j, &g) in ranking.candidates(block).iter().zip(ranking.gammas(block)) {
                    let log_gamma = g.ln();
                    for e in ep.block_sites(j as usize) {
                        logits[slot] = log_gamma + dot(feature, ze.feature(e)) / tau;
                        c_row[slot] = e as u32;
                        slot += 1;
                    }
                }
                softmax_into(&logits, w_row);
            }
        }
    };

    if parallel {
        weights.par_chunks_mut(band).zip(columns.par_chunks_mut(band)).enumerate().for_each(fill_band);
    } else {
        weights.chunks_mut(band).zip(columns.chunks_mut(band)).enumerate().for_each(&fill_band);
    }
    SparseCorrespondence::fixed(qp.height, qp.width, ep.sites(), per_row, columns, weights)
}

/// Everything a full correspondence run needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasConfig {
    pub block_side: usize,
    pub k: usize,
    pub topk: TopKConfig,
    /// Attention temperature.
    pub tau: f64,
    pub parallel: bool,
}

impl Default for RasConfig {
    fn default() -> Self {
        Self { block_side: 2, k: 3, topk: TopKConfig::default(), tau: 0.07, parallel: false }
    }
}

#[derive(Clone, Debug)]
pub struct RasOutput {
    pub ranking: BlockRanking,
    pub correspondence: SparseCorrespondence,
}

/// Block ranking followed by in-block attention.
pub fn ras_correspondence(query: &FeatureGrid, exemplar: &FeatureGrid, config: &RasConfig) -> Result<RasOutput> {
    if query.channels() != exemplar.channels() {
        return Err(Error::mismatch(format!(
            "query has {} channels, exemplar {}",
            query.channels(),
            exemplar.channels()
        )));
    }
    let (_, qb) = partition_blocks(query, config.block_side)?;
    let (_, eb) = partition_blocks(exemplar, config.block_side)?;
    let ranking = rank_blocks(&qb, &eb, config.k, &config.topk, config.parallel)?;
    let correspondence = block_attention(&ranking, query, exemplar, config.tau, config.parallel)?;
    Ok(RasOutput { ranking, correspondence })
}

pub(crate) fn try_buffer<T>(len: usize) -> Result<Vec<T>> {
    let mut v = Vec::new();
    v.try_reserve_exact(len)
        .map_err(|_| Error::Allocation { bytes: len.saturating_mul(std::mem::size_of::<T>()) })?;
    Ok(v)
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Normalized `exp` of `logits`, max-shifted. `-inf` logits get weight 0.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max).exp() / sum) as f32;
    }
}
