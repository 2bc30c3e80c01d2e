use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use blockalign::bench::{run_bench, write_csv, BenchConfig, CountingAllocator};
use blockalign::fusion::{confidence_map, fuse, fuse_multichannel, ConfidenceMap, MultiChannelMap};
use blockalign::gradcheck::{run_gradcheck, GradcheckConfig, PASS_THRESHOLD};
use blockalign::position::{append_position, semantic_pe, vanilla_pe};
use blockalign::ras::{ras_correspondence, RasConfig};
use blockalign::sinkhorn::{sinkhorn_plan, soft_topk, TopKConfig, TopKProblem};
use blockalign::tensor::{encode, l2_normalize_features, read_tensor, FeatureGrid, LabelMask, Tensor, NORM_EPSILON};
use blockalign::Error;
use clap::{Args, Parser, Subcommand};

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_INVALID: u8 = 4;
const EXIT_CHECK: u8 = 5;

/// Block-ranked sparse correspondence between feature grids.
#[derive(Parser)]
#[command(name = "blockalign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Warp an exemplar onto a conditional grid.
    Warp(WarpArgs),
    /// Soft top-k of a list of scores.
    Topk(TopkArgs),
    /// Compare top-k gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Position channels for a label mask.
    Spe(SpeArgs),
    /// Confidence-weighted fusion of two feature grids.
    Fuse(FuseArgs),
    /// Dense vs block correspondence memory and time.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SolverArgs {
    /// Kernel sharpness.
    #[arg(long, default_value_t = 50.0)]
    lambda: f64,
    /// Solver iteration budget.
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Marginal tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

impl SolverArgs {
    fn config(&self) -> TopKConfig {
        TopKConfig { lambda: self.lambda, max_iters: self.iters, tolerance: self.tol }
    }
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long)]
    cond: PathBuf,
    #[arg(long)]
    exemplar: PathBuf,
    /// Label mask of the conditional grid; adds position channels to both sides.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Label mask of the exemplar, if it differs from `--mask`.
    #[arg(long, requires = "mask")]
    exemplar_mask: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    block_side: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Attention temperature.
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    /// Scale of the appended position channels.
    #[arg(long, default_value_t = 1.0)]
    spe_weight: f32,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct TopkArgs {
    /// Comma-separated scores, e.g. "0.9,0.1,-0.5".
    #[arg(long, allow_hyphen_values = true)]
    scores: String,
    #[arg(long)]
    k: usize,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 20.0)]
    lambda: f64,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

#[derive(Args)]
struct SpeArgs {
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// One frame for the whole image instead of one per label.
    #[arg(long)]
    vanilla: bool,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    cond: PathBuf,
    #[arg(long)]
    warped: PathBuf,
    /// Block confidence, one channel or one per feature channel.
    #[arg(long)]
    cmap: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated HxWxD grid sizes.
    #[arg(long, default_value = "32x32x8,64x64x8,128x128x8", value_delimiter = ',', value_parser = parse_size)]
    sizes: Vec<(usize, usize, usize)>,
    #[arg(long, default_value_t = 2)]
    block_side: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0.07)]
    tau: f64,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value_t = 1)]
    repetitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    parallel: bool,
    /// Write 0 in the ms column so reruns are byte-identical.
    #[arg(long)]
    no_timing: bool,
    /// CSV destination; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_size(s: &str) -> Result<(usize, usize, usize), String> {
    let bad = || format!("bad size {s:?}, expected HxWxD");
    let dims: Vec<usize> = s.trim().split('x').map(|d| d.parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
    match dims[..] {
        [h, w, d] => Ok((h, w, d)),
        _ => Err(bad()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Warp(args) => warp(args),
        Command::Topk(args) => topk(args),
        Command::Gradcheck(args) => gradcheck(args),
        Command::Spe(args) => spe(args),
        Command::Fuse(args) => fuse_cmd(args),
        Command::Bench(args) => bench(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Csv(c) if c.is_io_error() => EXIT_IO,
        Error::InvalidParameter(_) => EXIT_USAGE,
        _ => EXIT_INVALID,
    }
}

type CmdResult = Result<ExitCode, Error>;

fn read_features(path: &Path) -> Result<FeatureGrid, Error> {
    read_tensor(path)?.into_features()
}

fn read_mask(path: &Path) -> Result<LabelMask, Error> {
    read_tensor(path)?.into_labels()
}

fn with_position(grid: &FeatureGrid, mask: Option<&LabelMask>, weight: f32) -> Result<FeatureGrid, Error> {
    let normalized = l2_normalize_features(grid, NORM_EPSILON);
    match mask {
        Some(mask) => {
            if (mask.height(), mask.width()) != (grid.height(), grid.width()) {
                return Err(Error::ShapeMismatch(format!(
                    "mask is {}×{}, features {}×{}",
                    mask.height(),
                    mask.width(),
                    grid.height(),
                    grid.width()
                )));
            }
            append_position(&normalized, &semantic_pe(mask)?, weight)
        }
        None => Ok(normalized),
    }
}

fn warp(args: WarpArgs) -> CmdResult {
    let cond = read_features(&args.cond)?;
    let exemplar = read_features(&args.exemplar)?;
    let mask = args.mask.as_deref().map(read_mask).transpose()?;
    let exemplar_mask = match args.exemplar_mask.as_deref() {
        Some(path) => Some(read_mask(path)?),
        None => mask.clone(),
    };
    let query = with_position(&cond, mask.as_ref(), args.spe_weight)?;
    let target = with_position(&exemplar, exemplar_mask.as_ref(), args.spe_weight)?;

    let config = RasConfig {
        block_side: args.block_side,
        k: args.k,
        topk: args.solver.config(),
        tau: args.tau,
        parallel: args.parallel,
    };
    let out = ras_correspondence(&query, &target, &config)?;
    let warped = out.correspondence.warp_with(&exemplar, args.parallel)?;
    let cmap = confidence_map(&out.ranking).to_grid();

    // everything is computed before the first file is touched
    let warped_bytes = encode(&Tensor::from(warped))?;
    let cmap_bytes = encode(&Tensor::from(cmap))?;
    let mut csv_bytes = Vec::new();
    out.correspondence.write_csv(&mut csv_bytes)?;
    fs::create_dir_all(&args.out_dir)?;
    fs::write(args.out_dir.join("warped.ftn"), warped_bytes)?;
    fs::write(args.out_dir.join("cmap.ftn"), cmap_bytes)?;
    fs::write(args.out_dir.join("correspondence.csv"), csv_bytes)?;
    Ok(ExitCode::SUCCESS)
}

fn topk(args: TopkArgs) -> CmdResult {
    let scores: Vec<f64> = args
        .scores
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| Error::InvalidParameter(format!("bad score {s:?}"))))
        .collect::<Result<_, _>>()?;
    let problem = TopKProblem::new(scores, args.k, args.solver.config())?;
    let plan = sinkhorn_plan(&problem);
    let selection = soft_topk(&problem);
    let join = |v: Vec<String>| v.join(",");
    let mut out = io::stdout().lock();
    writeln!(out, "gamma: {}", join(selection.gamma.iter().map(|g| format!("{g:.6}")).collect()))?;
    writeln!(out, "hard: {}", join(selection.hard.iter().map(|&h| u8::from(h).to_string()).collect()))?;
    writeln!(out, "iterations: {}", plan.iterations_used)?;
    writeln!(out, "marginal_error: {:e}", plan.marginal_error)?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(args: GradcheckArgs) -> CmdResult {
    let config = GradcheckConfig {
        n: args.n,
        k: args.k,
        topk: TopKConfig { lambda: args.lambda, max_iters: args.iters, tolerance: args.tol },
        trials: args.trials,
        seed: args.seed,
        step: args.step,
    };
    let report = run_gradcheck(&config)?;
    let verdict = if report.passed() { "pass" } else { "fail" };
    println!(
        "{verdict}: worst relative error {:e} over {} components in {} trials (threshold {PASS_THRESHOLD:e})",
        report.worst_relative_error, report.compared, report.trials
    );
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(EXIT_CHECK) })
}

fn spe(args: SpeArgs) -> CmdResult {
    let mask = read_mask(&args.mask)?;
    let channels = if args.vanilla { vanilla_pe(mask.height(), mask.width())? } else { semantic_pe(&mask)? };
    let bytes = encode(&Tensor::from(channels.into_grid()))?;
    fs::write(&args.out, bytes)?;
    Ok(ExitCode::SUCCESS)
}

fn fuse_cmd(args: FuseArgs) -> CmdResult {
    let cond = read_features(&args.cond)?;
    let warped = read_features(&args.warped)?;
    let cmap = read_features(&args.cmap)?;
    let fused = if cmap.channels() == 1 {
        fuse(&cond, &warped, &ConfidenceMap::from_grid(&cmap)?)?
    } else {
        fuse_multichannel(&cond, &warped, &MultiChannelMap::new(cmap)?)?
    };
    let bytes = encode(&Tensor::from(fused))?;
    fs::write(&args.out, bytes)?;
    Ok(ExitCode::SUCCESS)
}

fn bench(args: BenchArgs) -> CmdResult {
    let config = BenchConfig {
        sizes: args.sizes,
        block_side: args.block_side,
        k: args.k,
        tau: args.tau,
        topk: args.solver.config(),
        repetitions: args.repetitions,
        seed: args.seed,
        parallel: args.parallel,
        timing: !args.no_timing,
    };
    let records = run_bench(&config)?;
    for r in records.iter().filter(|r| r.entries.is_none()) {
        eprintln!("warning: dense correspondence for L = {} could not be allocated", r.l);
    }
    let mut csv = Vec::new();
    write_csv(&records, &mut csv)?;
    match &args.out {
        Some(path) => fs::write(path, csv)?,
        None => io::stdout().lock().write_all(&csv)?,
    }
    Ok(ExitCode::SUCCESS)
}
