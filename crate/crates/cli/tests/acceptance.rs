//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! criterion fails.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use blockalign::bench::loglog_slope;
use blockalign::fusion::{fuse, fuse_multichannel, ConfidenceMap, MultiChannelMap};
use blockalign::metrics::cycle_loss;
use blockalign::position::{semantic_pe, vanilla_pe};
use blockalign::ras::{ras_correspondence, RasConfig};
use blockalign::sinkhorn::{hard_topk_oracle, sinkhorn_plan, soft_topk, TopKConfig, TopKProblem};
use blockalign::tensor::{l2_normalize_features, read_tensor, write_tensor, FeatureGrid, LabelMask, Tensor, NORM_EPSILON};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("top-k exactness", topk_exactness),
        ("marginal feasibility", marginal_feasibility),
        ("gradient correctness", gradient_correctness),
        ("complexity", complexity),
        ("self-alignment", self_alignment),
        ("shift recovery", shift_recovery),
        ("oracle equivalence", oracle_equivalence),
        ("position encoding", position_properties),
        ("fusion algebra", fusion_algebra),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockalign")).args(args).output().expect("binary runs")
}

fn cli_ok(args: &[&str]) -> Result<Output, String> {
    let out = cli(args);
    ensure(out.status.success(), || {
        format!("`blockalign {}` exited with {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr))
    })?;
    Ok(out)
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureGrid {
    FeatureGrid::from_fn(h, w, d, |_, _, _| rng.gen_range(-1.0f32..=1.0)).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Scores in [-1, 1] whose k-th and (k+1)-th largest values differ by at least `gap`.
fn separated_scores(rng: &mut ChaCha8Rng, n: usize, k: usize, gap: f64) -> Vec<f64> {
    loop {
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        if k == n {
            return scores;
        }
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted[k - 1] - sorted[k] >= gap {
            return scores;
        }
    }
}

fn topk_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let instances: Vec<(Vec<f64>, usize)> = (0..500)
        .map(|_| {
            let n = rng.gen_range(4..=64);
            let k = rng.gen_range(1..=n);
            (separated_scores(&mut rng, n, k, 0.05), k)
        })
        .collect();
    let config = TopKConfig { lambda: 200.0, ..TopKConfig::default() };
    let start = Instant::now();
    let mut mismatches = 0;
    for (scores, k) in &instances {
        let selection = soft_topk(&TopKProblem::new(scores.clone(), *k, config).unwrap());
        let mut soft: Vec<usize> = selection.top_indices(*k);
        soft.sort_unstable();
        let hard: Vec<usize> = hard_topk_oracle(scores, *k).unwrap().iter().enumerate().filter(|p| *p.1).map(|p| p.0).collect();
        if soft != hard {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(mismatches == 0, || format!("{mismatches} of 500 instances selected a different set"))?;
    ensure(secs < 10.0, || format!("took {secs:.2}s"))?;
    Ok(format!("500/500 sets exact at λ=200 in {secs:.3}s"))
}

fn marginal_feasibility() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tolerance = 1e-6;
    let (mut converged, mut total) = (0, 0);
    for lambda in [5.0, 20.0, 50.0, 200.0] {
        for _ in 0..250 {
            let n = rng.gen_range(1..=64);
            let k = rng.gen_range(1..=n);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let config = TopKConfig { lambda, max_iters: 1000, tolerance };
            let plan = sinkhorn_plan(&TopKProblem::new(scores, k, config).unwrap());
            total += 1;
            if !plan.converged(tolerance) {
                continue;
            }
            converged += 1;
            let nf = n as f64;
            let mut cols = [0.0f64; 2];
            for row in &plan.plan {
                ensure(row[0] >= 0.0 && row[1] >= 0.0, || format!("negative entry {row:?}"))?;
                let r = row[0] + row[1];
                ensure((r - 1.0 / nf).abs() <= tolerance, || format!("row sum {r} vs {}", 1.0 / nf))?;
                cols[0] += row[0];
                cols[1] += row[1];
            }
            let nu = [(n - k) as f64 / nf, k as f64 / nf];
            ensure((cols[0] - nu[0]).abs() <= tolerance && (cols[1] - nu[1]).abs() <= tolerance, || {
                format!("column sums {cols:?} vs {nu:?}")
            })?;
        }
    }
    ensure(converged > 0, || "no plan converged".into())?;
    Ok(format!("all {converged} converged plans (of {total} solved) within 1e-6 of every marginal"))
}

fn gradient_correctness() -> Outcome {
    let out = cli(&["gradcheck", "--n", "8", "--k", "3", "--lambda", "20", "--trials", "50"]);
    let text = String::from_utf8_lossy(&out.stdout).trim().to_string();
    let worst: f64 = text
        .split("worst relative error ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("unparsable report {text:?}"))?;
    ensure(out.status.success() && worst < 1e-3, || format!("exit {:?}: {text}", out.status.code()))?;
    Ok(format!("max relative error {worst:.2e} over 50 trials"))
}

struct Row {
    method: String,
    l: usize,
    b: usize,
    k: usize,
    entries: usize,
    ranking_scores: usize,
    peak: f64,
}

fn parse_bench(csv: &str) -> Result<Vec<Row>, String> {
    let mut lines = csv.lines();
    ensure(lines.next() == Some("method,L,b,k,entries,ranking_scores,peak_bytes,ms,warp_l1"), || "bad header".into())?;
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| f[i].parse::<usize>().map_err(|_| format!("bad field {i} in {line:?}"));
            Ok(Row {
                method: f[0].to_string(),
                l: num(1)?,
                b: num(2)?,
                k: num(3)?,
                entries: num(4)?,
                ranking_scores: num(5)?,
                peak: num(6)? as f64,
            })
        })
        .collect()
}

fn complexity() -> Outcome {
    let out = cli_ok(&["bench", "--no-timing"])?;
    let rows = parse_bench(&String::from_utf8_lossy(&out.stdout))?;
    ensure(rows.len() == 6, || format!("{} rows", rows.len()))?;
    for r in &rows {
        let expect = if r.method == "ras" { r.l * r.k * r.b } else { r.l * r.l };
        ensure(r.entries == expect, || format!("{} at L={}: {} entries, expected {expect}", r.method, r.l, r.entries))?;
        if r.method == "ras" {
            let n = r.l / r.b;
            ensure(r.ranking_scores == n * n, || format!("ranking scores {} at L={}", r.ranking_scores, r.l))?;
        }
    }
    let at = |method: &str, l: usize| rows.iter().find(|r| r.method == method && r.l == l).unwrap();
    let (dense, ras) = (at("dense", 4096), at("ras", 4096));
    ensure((ras.b, ras.k, dense.entries, ras.entries) == (4, 3, 16_777_216, 49_152), || "unexpected L=4096 counts".into())?;
    let stored_ratio = dense.entries as f64 / ras.entries as f64;
    let work_ratio = dense.entries as f64 / (ras.entries + ras.ranking_scores) as f64;
    ensure((stored_ratio - 16_777_216.0 / 49_152.0).abs() < 1e-9, || format!("stored ratio {stored_ratio}"))?;
    ensure((work_ratio - 16_777_216.0 / 1_097_728.0).abs() < 1e-9, || format!("work ratio {work_ratio}"))?;
    let slope = |method: &str| {
        let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.method == method).map(|r| (r.l as f64, r.peak)).collect();
        loglog_slope(&pts)
    };
    let (ras_slope, dense_slope) = (slope("ras"), slope("dense"));
    ensure(ras_slope <= 1.2 && dense_slope >= 1.8, || format!("peak slopes ras {ras_slope:.3}, dense {dense_slope:.3}"))?;
    Ok(format!(
        "entries exact; stored ratio {stored_ratio:.1}x, work ratio {work_ratio:.2}x; peak slopes ras {ras_slope:.3}, dense {dense_slope:.3}"
    ))
}

fn warp_via_cli(dir: &Path, cond: &FeatureGrid, exemplar: &FeatureGrid, extra: &[&str]) -> Result<(FeatureGrid, String), String> {
    let cond_path = dir.join("cond.ftn");
    let ex_path = dir.join("exemplar.ftn");
    let out_dir = dir.join("out");
    write_tensor(&Tensor::from(cond.clone()), &cond_path).map_err(|e| e.to_string())?;
    write_tensor(&Tensor::from(exemplar.clone()), &ex_path).map_err(|e| e.to_string())?;
    let mut args = vec!["warp", "--cond", path_str(&cond_path), "--exemplar", path_str(&ex_path), "--out-dir", path_str(&out_dir)];
    args.extend_from_slice(extra);
    cli_ok(&args)?;
    let warped = read_tensor(out_dir.join("warped.ftn")).and_then(|t| t.into_features()).map_err(|e| e.to_string())?;
    let csv = fs::read_to_string(out_dir.join("correspondence.csv")).map_err(|e| e.to_string())?;
    Ok((warped, csv))
}

/// Largest-weight exemplar index of every query row in a correspondence CSV.
fn csv_argmax(csv: &str, rows: usize) -> Vec<usize> {
    let mut best = vec![(usize::MAX, f32::NEG_INFINITY); rows];
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (q, e, w): (usize, usize, f32) = (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap());
        if w > best[q].1 {
            best[q] = (e, w);
        }
    }
    best.into_iter().map(|b| b.0).collect()
}

fn linf(a: &FeatureGrid, b: &FeatureGrid) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

const SELF_TAU: &str = "0.001";

fn self_alignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = random_grid(&mut rng, 32, 32, 8);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut details = Vec::new();
    for k in ["1", "3"] {
        let (warped, csv) = warp_via_cli(dir.path(), &grid, &grid, &["--block-side", "2", "--k", k, "--tau", SELF_TAU])?;
        let argmax = csv_argmax(&csv, 1024);
        ensure(argmax.iter().enumerate().all(|(q, &e)| q == e), || format!("k={k}: argmax is not the identity"))?;
        let err = linf(&warped, &grid);
        ensure(err < 1e-5, || format!("k={k}: warp L∞ error {err:e}"))?;

        let normalized = l2_normalize_features(&grid, NORM_EPSILON);
        let config = RasConfig { block_side: 2, k: k.parse().unwrap(), tau: SELF_TAU.parse().unwrap(), ..RasConfig::default() };
        let out = ras_correspondence(&normalized, &normalized, &config).map_err(|e| e.to_string())?;
        let cyc = cycle_loss(&out.correspondence, &grid).map_err(|e| e.to_string())?;
        ensure(cyc < 1e-5, || format!("k={k}: cycle loss {cyc:e}"))?;
        details.push(format!("k={k}: L∞ {err:.1e}, cycle {cyc:.1e}"));
    }
    Ok(format!("identity argmax at τ={SELF_TAU}; {}", details.join("; ")))
}

fn shift_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (h, w, s) = (32, 32, 2);
    let cond = random_grid(&mut rng, h, w, 8);
    // exemplar content at (y, x) is the conditional at (y - s, x - s), wrapped
    let exemplar = FeatureGrid::from_fn(h, w, 8, |y, x, c| cond.feature_at((y + h - s) % h, (x + w - s) % w)[c]).unwrap();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (warped, _) = warp_via_cli(dir.path(), &cond, &exemplar, &["--block-side", "2", "--k", "1", "--tau", "0.01"])?;
    let err = linf(&warped, &cond);
    let mean: f64 = warped.data().iter().zip(cond.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / cond.data().len() as f64;
    ensure(err < 1e-3, || format!("largest element error {err:e}"))?;
    Ok(format!("one-block diagonal shift undone, largest element error {err:.1e}, mean {mean:.1e}"))
}

/// Warp through the full `L × L` matrix with the block mask applied.
fn masked_dense_warp(query: &FeatureGrid, exemplar: &FeatureGrid, s: usize, k: usize, tau: f64, topk: &TopKConfig) -> (FeatureGrid, Vec<Vec<usize>>) {
    let norm = |g: &FeatureGrid, i: usize| -> Vec<f64> {
        let v: Vec<f64> = g.feature(i).iter().map(|&x| x as f64).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
        v.iter().map(|x| x / n).collect()
    };
    let (h, w, d) = (query.height(), query.width(), query.channels());
    let (eh, ew) = (exemplar.height(), exemplar.width());
    let block_of = |y: usize, x: usize, width: usize| (y / s) * (width / s) + x / s;
    let block_vec = |g: &FeatureGrid, bi: usize| -> Vec<f64> {
        let bw = g.width() / s;
        let (by, bx) = (bi / bw, bi % bw);
        let mut v = Vec::new();
        for oy in 0..s {
            for ox in 0..s {
                v.extend(g.feature_at(by * s + oy, bx * s + ox).iter().map(|&x| x as f64));
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
        v.iter().map(|x| x / n).collect()
    };
    let nq = (h / s) * (w / s);
    let ne = (eh / s) * (ew / s);
    let mut gamma = vec![vec![0.0f64; ne]; nq];
    let mut retrieved = Vec::new();
    for (i, gamma_row) in gamma.iter_mut().enumerate() {
        let qi = block_vec(query, i);
        let scores: Vec<f64> = (0..ne).map(|j| qi.iter().zip(block_vec(exemplar, j)).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0)).collect();
        let sel = soft_topk(&TopKProblem::new(scores, k, *topk).unwrap());
        let mut picked = sel.top_indices(k);
        picked.sort_unstable();
        for &j in &picked {
            gamma_row[j] = sel.gamma[j];
        }
        retrieved.push(picked);
    }
    let le = eh * ew;
    let mut out = vec![0.0f32; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let q = y * w + x;
            let i = block_of(y, x, w);
            let xq = norm(query, q);
            let mut row = vec![0.0f64; le];
            let mut logits = Vec::new();
            for e in 0..le {
                let j = block_of(e / ew, e % ew, ew);
                if retrieved[i].contains(&j) {
                    let cos: f64 = xq.iter().zip(norm(exemplar, e)).map(|(a, b)| a * b).sum();
                    logits.push((e, gamma[i][j].ln() + cos / tau));
                }
            }
            let m = logits.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|p| (p.1 - m).exp()).sum();
            for (e, l) in logits {
                row[e] = (l - m).exp() / z;
            }
            for c in 0..d {
                out[q * d + c] = (0..le).map(|e| row[e] * exemplar.feature(e)[c] as f64).sum::<f64>() as f32;
            }
        }
    }
    (FeatureGrid::new(h, w, d, out).unwrap(), retrieved)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shapes = [(4, 4), (8, 8), (8, 16), (16, 8), (16, 16)];
    let mut count = 0;
    let mut worst = 0.0f32;
    for &(h, w) in &shapes {
        for s in [1, 2, 4] {
            for k in [1, 2, 3] {
                for tau in [0.01, 0.07, 0.5] {
                    let d = rng.gen_range(1..=6);
                    let query = random_grid(&mut rng, h, w, d);
                    let exemplar = random_grid(&mut rng, h, w, d);
                    let n = (h / s) * (w / s);
                    if k > n {
                        continue;
                    }
                    let config = RasConfig { block_side: s, k, tau, ..RasConfig::default() };
                    let out = ras_correspondence(&query, &exemplar, &config).map_err(|e| e.to_string())?;
                    let warped = out.correspondence.warp(&exemplar).map_err(|e| e.to_string())?;
                    let (expected, retrieved) = masked_dense_warp(&query, &exemplar, s, k, tau, &config.topk);
                    for (i, picked) in retrieved.iter().enumerate() {
                        let got: Vec<usize> = out.ranking.candidates(i).iter().map(|&j| j as usize).collect();
                        ensure(&got == picked, || format!("{h}×{w} s={s} k={k}: block {i} retrieved {got:?}, oracle {picked:?}"))?;
                    }
                    let err = linf(&warped, &expected);
                    worst = worst.max(err);
                    ensure(err <= 1e-5, || format!("{h}×{w} s={s} k={k} τ={tau}: L∞ {err:e}"))?;
                    count += 1;
                }
            }
        }
    }
    Ok(format!("{count} instances with L ≤ 256, worst L∞ {worst:.1e}"))
}

fn position_properties() -> Outcome {
    for (h, w) in [(1, 1), (1, 9), (7, 1), (5, 8), (32, 32)] {
        let mask = LabelMask::filled(h, w, 4).unwrap();
        let spe = semantic_pe(&mask).unwrap();
        ensure(spe == vanilla_pe(h, w).unwrap(), || format!("{h}×{w} single region differs from vanilla"))?;
    }

    // the same L-shaped region stamped at two places
    let shape = [(0, 0), (1, 0), (2, 0), (2, 1), (2, 2)];
    let mut labels = vec![0u32; 12 * 12];
    for &(dy, dx) in &shape {
        labels[(1 + dy) * 12 + 1 + dx] = 1;
        labels[(7 + dy) * 12 + 6 + dx] = 2;
    }
    let spe = semantic_pe(&LabelMask::new(12, 12, labels).unwrap()).unwrap();
    for &(dy, dx) in &shape {
        ensure(spe.at(1 + dy, 1 + dx) == spe.at(7 + dy, 6 + dx), || format!("offset ({dy},{dx}) differs between copies"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(1..=20), rng.gen_range(1..=20));
        let labels: Vec<u32> = (0..h * w).map(|_| rng.gen_range(0..5)).collect();
        let spe = semantic_pe(&LabelMask::new(h, w, labels).unwrap()).unwrap();
        ensure(spe.grid().data().iter().all(|v| (-1.0..=1.0).contains(v)), || format!("value outside [-1, 1] in {h}×{w}"))?;
    }

    let mut labels = vec![0u32; 25];
    labels[12] = 3;
    let spe = semantic_pe(&LabelMask::new(5, 5, labels).unwrap()).unwrap();
    ensure(spe.at(2, 2) == (0.0, 0.0), || format!("single pixel at {:?}", spe.at(2, 2)))?;
    Ok("whole-image equals vanilla exactly; translated copies identical; 50 random masks in range; single pixel at origin".into())
}

fn fusion_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..100 {
        let (bh, bw, s, d) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=3), rng.gen_range(1..=5));
        let x = FeatureGrid::from_fn(bh * s, bw * s, d, |_, _, _| rng.gen_range(-10.0f32..=10.0)).unwrap();
        let w = FeatureGrid::from_fn(bh * s, bw * s, d, |_, _, _| rng.gen_range(-10.0f32..=10.0)).unwrap();
        let c: Vec<f32> = (0..bh * bw).map(|_| rng.gen_range(0.0f32..=1.0)).collect();
        let cmap = ConfidenceMap::new(bh, bw, c).unwrap();
        let f = fuse(&x, &w, &cmap).unwrap();
        for ((&v, &a), &b) in f.data().iter().zip(x.data()).zip(w.data()) {
            ensure(a.min(b) <= v && v <= a.max(b), || format!("trial {trial}: {v} outside [{a}, {b}]"))?;
        }
        let multi = fuse_multichannel(&x, &w, &MultiChannelMap::replicate(&cmap, d).unwrap()).unwrap();
        ensure(multi.data().iter().zip(f.data()).all(|(p, q)| p.to_bits() == q.to_bits()), || format!("trial {trial}: replicated map differs"))?;

        let zeros = ConfidenceMap::new(bh, bw, vec![0.0; bh * bw]).unwrap();
        let ones = ConfidenceMap::new(bh, bw, vec![1.0; bh * bw]).unwrap();
        let same_bits = |p: &FeatureGrid, q: &FeatureGrid| p.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same_bits(&fuse(&x, &w, &zeros).unwrap(), &x), || format!("trial {trial}: c = 0 not exact"))?;
        ensure(same_bits(&fuse(&x, &w, &ones).unwrap(), &w), || format!("trial {trial}: c = 1 not exact"))?;
    }
    Ok("c ∈ {0, 1} bit-exact, convex, replicated multi-channel identical on 100 random triples".into())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cond = random_grid(&mut rng, 32, 32, 8);
    let exemplar = random_grid(&mut rng, 32, 32, 8);
    let labels: Vec<u32> = (0..32 * 32).map(|i| ((i / 32) / 11 * 3 + (i % 32) / 13) as u32).collect();
    let cond_path = dir.path().join("cond.ftn");
    let ex_path = dir.path().join("exemplar.ftn");
    let mask_path = dir.path().join("mask.ftn");
    write_tensor(&Tensor::from(cond), &cond_path).unwrap();
    write_tensor(&Tensor::from(exemplar), &ex_path).unwrap();
    write_tensor(&Tensor::from(LabelMask::new(32, 32, labels).unwrap()), &mask_path).unwrap();

    let mut warp_runs = Vec::new();
    for (run, parallel) in [(0, false), (1, false), (2, true), (3, true)] {
        let out_dir = dir.path().join(format!("warp{run}"));
        let mut args = vec![
            "warp",
            "--cond",
            path_str(&cond_path),
            "--exemplar",
            path_str(&ex_path),
            "--mask",
            path_str(&mask_path),
            "--out-dir",
            path_str(&out_dir),
        ];
        if parallel {
            args.push("--parallel");
        }
        cli_ok(&args)?;
        let files: Vec<Vec<u8>> =
            ["warped.ftn", "cmap.ftn", "correspondence.csv"].iter().map(|f| fs::read(out_dir.join(f)).unwrap()).collect();
        warp_runs.push(files);
    }
    ensure(warp_runs.windows(2).all(|p| p[0] == p[1]), || "warp outputs differ between runs".into())?;

    let mut bench_runs = Vec::new();
    for parallel in [false, false, true, true] {
        let mut args = vec!["bench", "--no-timing", "--sizes", "16x16x8,32x32x8"];
        if parallel {
            args.push("--parallel");
        }
        bench_runs.push(cli_ok(&args)?.stdout);
    }
    ensure(bench_runs.windows(2).all(|p| p[0] == p[1]), || "bench outputs differ between runs".into())?;
    Ok("warp (with mask) and bench outputs byte-identical across 2 serial and 2 parallel runs".into())
}

