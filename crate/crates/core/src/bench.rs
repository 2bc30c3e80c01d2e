//! Memory and runtime comparison of the dense correspondence against the
//! block scheme.
//!
//! Peak memory is measured by [`CountingAllocator`], which has to be the
//! process's global allocator:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: blockalign::bench::CountingAllocator = blockalign::bench::CountingAllocator;
//! ```
//!
//! Counting is per thread, so peaks are always taken from a single-threaded
//! construction; with `parallel` set, timing comes from separate parallel
//! runs. Entry counts and peaks are therefore identical in both modes.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::correspondence::{dense_correspondence, SparseCorrespondence};
use crate::error::{Error, Result};
use crate::metrics::consistency_loss;
use crate::ras::{ras_correspondence, RasConfig};
use crate::sinkhorn::TopKConfig;
use crate::tensor::FeatureGrid;

/// Pass-through to the system allocator that tracks the calling thread's
/// live bytes while a [`measure_peak`] call is running.
pub struct CountingAllocator;

thread_local! {
    static TRACKING: Cell<bool> = const { Cell::new(false) };
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
}

fn record(delta: isize) {
    let _ = TRACKING.try_with(|tracking| {
        if tracking.get() {
            let live = LIVE.get() + delta;
            LIVE.set(live);
            if live > PEAK.get() {
                PEAK.set(live);
            }
        }
    });
}

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        record(-(layout.size() as isize));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            record(new_size as isize - layout.size() as isize);
        }
        p
    }
}

/// Runs `f` and returns its result with the largest number of bytes this
/// thread had allocated at once during the call (net of frees).
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, usize) {
    LIVE.set(0);
    PEAK.set(0);
    TRACKING.set(true);
    let out = f();
    TRACKING.set(false);
    (out, PEAK.get().max(0) as usize)
}

/// Whether [`CountingAllocator`] is the global allocator.
pub fn counting_installed() -> bool {
    let (_, peak) = measure_peak(|| std::hint::black_box(vec![0u8; 64]));
    peak >= 64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Dense,
    Ras,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Dense => "dense",
            Method::Ras => "ras",
        }
    }
}

/// One CSV row. `None` marks values that could not be measured because the
/// dense buffer failed to allocate.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub method: Method,
    /// Query sites.
    pub l: usize,
    /// Sites per block.
    pub b: usize,
    pub k: usize,
    pub entries: Option<usize>,
    pub ranking_scores: usize,
    pub peak_bytes: Option<usize>,
    pub ms: Option<f64>,
    /// Mean absolute difference from the dense warp.
    pub warp_l1: Option<f64>,
}

pub const CSV_HEADER: [&str; 9] = ["method", "L", "b", "k", "entries", "ranking_scores", "peak_bytes", "ms", "warp_l1"];

pub fn write_csv<W: Write>(records: &[BenchRecord], writer: W) -> Result<()> {
    fn opt<T: ToString>(v: Option<T>) -> String {
        v.map_or_else(String::new, |v| v.to_string())
    }
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(CSV_HEADER)?;
    for r in records {
        csv.write_record([
            r.method.as_str().to_string(),
            r.l.to_string(),
            r.b.to_string(),
            r.k.to_string(),
            opt(r.entries),
            r.ranking_scores.to_string(),
            opt(r.peak_bytes),
            opt(r.ms),
            opt(r.warp_l1),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// `(height, width, channels)` of each feature grid pair.
    pub sizes: Vec<(usize, usize, usize)>,
    pub block_side: usize,
    pub k: usize,
    pub tau: f64,
    pub topk: TopKConfig,
    /// Timed runs per construction; the median is reported.
    pub repetitions: usize,
    pub seed: u64,
    pub parallel: bool,
    /// When off, `ms` is written as 0 so output is byte-reproducible.
    pub timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![(32, 32, 8), (64, 64, 8), (128, 128, 8)],
            block_side: 2,
            k: 3,
            tau: 0.07,
            topk: TopKConfig::default(),
            repetitions: 1,
            seed: 0,
            parallel: false,
            timing: true,
        }
    }
}

/// Query and exemplar grids for size index `index`, uniform in `[-1, 1]`.
pub fn bench_grids(seed: u64, index: usize, size: (usize, usize, usize)) -> Result<(FeatureGrid, FeatureGrid)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
    let (h, w, d) = size;
    let query = FeatureGrid::from_fn(h, w, d, |_, _, _| rng.gen_range(-1.0f32..=1.0))?;
    let exemplar = FeatureGrid::from_fn(h, w, d, |_, _, _| rng.gen_range(-1.0f32..=1.0))?;
    Ok((query, exemplar))
}

struct Measured {
    correspondence: Result<SparseCorrespondence>,
    peak: usize,
    ms: f64,
}

/// Peak from a serial run, time as the median over `repetitions` runs.
fn measure(config: &BenchConfig, build: impl Fn(bool) -> Result<SparseCorrespondence>) -> Measured {
    let start = Instant::now();
    let (mut correspondence, peak) = measure_peak(|| build(false));
    let mut times = Vec::new();
    if !config.parallel {
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    while config.timing && correspondence.is_ok() && times.len() < config.repetitions {
        let start = Instant::now();
        correspondence = build(config.parallel);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let ms = if config.timing && !times.is_empty() { times[times.len() / 2] } else { 0.0 };
    Measured { correspondence, peak, ms }
}

pub fn run_bench(config: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if !counting_installed() {
        return Err(Error::param("peak measurement needs CountingAllocator as the global allocator"));
    }
    if config.repetitions == 0 {
        return Err(Error::param("repetitions must be at least 1"));
    }
    let b = config.block_side * config.block_side;
    let mut records = Vec::new();
    for (index, &size) in config.sizes.iter().enumerate() {
        let (query, exemplar) = bench_grids(config.seed, index, size)?;
        let l = query.sites();

        let dense = measure(config, |parallel| dense_correspondence(&query, &exemplar, config.tau, parallel));
        let (dense_warp, dense_record) = match dense.correspondence {
            Ok(t) => {
                let warp = t.warp_with(&exemplar, config.parallel)?;
                let record = BenchRecord {
                    method: Method::Dense,
                    l,
                    b,
                    k: config.k,
                    entries: Some(t.entries()),
                    ranking_scores: 0,
                    peak_bytes: Some(dense.peak),
                    ms: Some(dense.ms),
                    warp_l1: Some(0.0),
                };
                (Some(warp), record)
            }
            Err(Error::Allocation { .. }) => {
                let record = BenchRecord {
                    method: Method::Dense,
                    l,
                    b,
                    k: config.k,
                    entries: None,
                    ranking_scores: 0,
                    peak_bytes: None,
                    ms: None,
                    warp_l1: None,
                };
                (None, record)
            }
            Err(e) => return Err(e),
        };
        records.push(dense_record);

        let ras_config = RasConfig {
            block_side: config.block_side,
            k: config.k,
            topk: config.topk,
            tau: config.tau,
            parallel: false,
        };
        let ras = measure(config, |parallel| {
            ras_correspondence(&query, &exemplar, &RasConfig { parallel, ..ras_config }).map(|o| o.correspondence)
        });
        let t = ras.correspondence?;
        let n = l / b;
        let warp_l1 = match &dense_warp {
            Some(dense) => Some(consistency_loss(&t.warp_with(&exemplar, config.parallel)?, dense)?),
            None => None,
        };
        records.push(BenchRecord {
            method: Method::Ras,
            l,
            b,
            k: config.k,
            entries: Some(t.entries()),
            ranking_scores: n * n,
            peak_bytes: Some(ras.peak),
            ms: Some(ras.ms),
            warp_l1,
        });
    }
    Ok(records)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}
