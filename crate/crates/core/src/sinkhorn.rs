//! Differentiable top-k selection through an entropy-regularized earth
//! mover's problem.
//!
//! A ranking problem over scores `a_1..a_N ∈ [-1, 1]` is posed as transport
//! between `N` source points of mass `1/N` and the two-point target `{-1, +1}`
//! with masses `(N-k)/N` and `k/N`. The cost is squared distance, so
//! `C[i] = [(a_i + 1)², (a_i - 1)²]`. Exact transport sends the `k` largest
//! scores to `+1`; with entropic smoothing the mass sent to `+1` becomes a
//! soft indicator `γ_i = N · T[i][1] ∈ [0, 1]` with `Σ γ = k`.
//!
//! The plan is found by alternately rescaling the rows and columns of the
//! kernel `exp(-λ C)` to the prescribed marginals.
//!
//! # Two-column form
//!
//! After a row rescaling, row `i` of the plan is `μ · (1 - σ_i, σ_i)` with
//! `σ_i = sigmoid(4λ a_i + h)`, because `(a - 1)² - (a + 1)² = -4a` and `h` is
//! the log ratio of the two column scalings. A column rescaling multiplies
//! column `j` by `ν_j / S_j`, where `S_j` is its current mass, which moves `h`
//! by `log(ν₂ / S₂) - log(ν₁ / S₁)`. One iteration therefore costs a single
//! exponential per score, and the scaling state is a log-space scalar at
//! every `λ`, so nothing underflows.
//!
//! # Annealing
//!
//! With a sharp kernel the plain iteration crawls: once every score away from
//! the selection boundary has saturated, `h` moves by a tiny amount per step.
//! The solver therefore starts at `λ / 2^s`, the largest such value with
//! `λ · max(C) ≤ 30`, runs each stage to tolerance or [`STAGE_ITERS`], and
//! doubles `λ` between stages while scaling `h` by the same factor. The
//! balanced `h` grows roughly linearly in `λ`, so each stage starts close to
//! feasible. The last stage always runs at the requested `λ`.
//!
//! Every `(λ, h)` entering an iteration is kept on a [`SinkhornTape`]. That is
//! enough to replay the solve bit-exactly and to differentiate the unrolled
//! iteration in [`soft_topk_backward`]. Gradients are those of the map that
//! actually ran, truncation and annealing included.
//!
//! All arithmetic inside the solver is `f64`.

use crate::error::{Error, Result};

/// Annealing starts at the largest `λ / 2^s` whose `λ · max(C)` is at most this.
pub const ANNEAL_START: f64 = 30.0;

/// Iteration cap for each annealing stage before the last.
pub const STAGE_ITERS: usize = 30;

/// Solver knobs shared by every ranking problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopKConfig {
    /// Kernel sharpness: the kernel is `exp(-lambda · C)`, i.e. `ε = 1/λ`.
    pub lambda: f64,
    pub max_iters: usize,
    /// Bound on the largest marginal violation of the returned plan.
    pub tolerance: f64,
}

impl Default for TopKConfig {
    fn default() -> Self {
        Self { lambda: 50.0, max_iters: 100, tolerance: 1e-6 }
    }
}

impl TopKConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::param(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.max_iters == 0 {
            return Err(Error::param("max_iters must be at least 1"));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::param(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        Ok(())
    }
}

/// One soft top-k instance: scores, `k`, and solver settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKProblem {
    scores: Vec<f64>,
    /// `false` where the raw score fell outside `[-1, 1]` and was clamped.
    unclamped: Vec<bool>,
    k: usize,
    config: TopKConfig,
}

impl TopKProblem {
    pub fn new(scores: impl Into<Vec<f64>>, k: usize, config: TopKConfig) -> Result<Self> {
        let mut scores = scores.into();
        config.validate()?;
        if scores.is_empty() {
            return Err(Error::param("top-k problem needs at least one score"));
        }
        if k == 0 || k > scores.len() {
            return Err(Error::param(format!("k = {k} outside 1..={}", scores.len())));
        }
        if let Some(index) = scores.iter().position(|s| s.is_nan()) {
            return Err(Error::NonFinite { index });
        }
        let unclamped = scores.iter().map(|s| (-1.0..=1.0).contains(s)).collect();
        for s in scores.iter_mut() {
            *s = s.clamp(-1.0, 1.0);
        }
        Ok(Self { scores, unclamped, k, config })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn config(&self) -> &TopKConfig {
        &self.config
    }
}

/// Cost of moving score `a_i` to `-1` and to `+1`.
pub fn build_cost(scores: &[f64]) -> Vec<[f64; 2]> {
    scores.iter().map(|&a| [(a + 1.0) * (a + 1.0), (a - 1.0) * (a - 1.0)]).collect()
}

/// Exact top-k indicator. Ties go to the lower index.
pub fn hard_topk_oracle(scores: &[f64], k: usize) -> Result<Vec<bool>> {
    if k == 0 || k > scores.len() {
        return Err(Error::param(format!("k = {k} outside 1..={}", scores.len())));
    }
    let mut selected = vec![false; scores.len()];
    for i in top_k_indices(scores, k) {
        selected[i] = true;
    }
    Ok(selected)
}

/// Indices of the `k` largest values, largest first, ties toward lower index.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // stable sort keeps lower indices first among equal values
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order.truncate(k);
    order
}

/// An `N × 2` transport plan with convergence diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Vec<[f64; 2]>,
    pub iterations_used: usize,
    /// Largest deviation of any row or column sum from its marginal.
    pub marginal_error: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.iter().map(|r| r[0] + r[1]).collect()
    }

    pub fn col_sums(&self) -> [f64; 2] {
        self.plan.iter().fold([0.0, 0.0], |acc, r| [acc[0] + r[0], acc[1] + r[1]])
    }

    /// `γ_i = N · T[i][1]`.
    pub fn gamma(&self) -> Vec<f64> {
        let n = self.plan.len() as f64;
        self.plan.iter().map(|r| n * r[1]).collect()
    }

    pub fn converged(&self, tolerance: f64) -> bool {
        self.marginal_error <= tolerance
    }
}

/// Soft and hard selections for one problem.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSelection {
    pub gamma: Vec<f64>,
    pub hard: Vec<bool>,
}

impl SoftSelection {
    /// Indices of the `k` largest `gamma`, largest first.
    pub fn top_indices(&self, k: usize) -> Vec<usize> {
        top_k_indices(&self.gamma, k)
    }
}

/// The executed iteration: the `λ` of every step and the column log ratio
/// `h` entering it. Row scalings follow from these and the scores.
#[derive(Clone, Debug)]
pub struct SinkhornTape {
    problem: TopKProblem,
    lambdas: Vec<f64>,
    shifts: Vec<f64>,
    plan: TransportPlan,
}

impl SinkhornTape {
    pub fn iterations(&self) -> usize {
        self.lambdas.len()
    }

    pub fn problem(&self) -> &TopKProblem {
        &self.problem
    }

    pub fn plan(&self) -> &TransportPlan {
        &self.plan
    }

    /// `λ` of each recorded step.
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Column log ratio entering each recorded step.
    pub fn shifts(&self) -> &[f64] {
        &self.shifts
    }

    /// Re-runs the recorded schedule from scratch.
    pub fn replay(&self) -> TransportPlan {
        self.plan_after(self.iterations())
    }

    /// Plan after the first `m` recorded steps.
    pub fn plan_after(&self, m: usize) -> TransportPlan {
        let m = m.min(self.iterations());
        let mut out = Solve::new(&self.problem.scores, self.problem.k);
        out.replay(&self.lambdas[..m]);
        out.plan()
    }

    /// `γ` for replacement scores pushed through the recorded schedule.
    ///
    /// This is the map [`soft_topk_backward`] differentiates, so it is the
    /// one a finite-difference check should perturb.
    pub fn gamma_at(&self, scores: &[f64]) -> Result<Vec<f64>> {
        if scores.len() != self.problem.len() {
            return Err(Error::mismatch(format!(
                "{} scores given, tape was recorded with {}",
                scores.len(),
                self.problem.len()
            )));
        }
        let scores: Vec<f64> = scores.iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        let mut out = Solve::new(&scores, self.problem.k);
        out.replay(&self.lambdas);
        Ok(out.gamma())
    }
}

/// Solves the regularized transport problem, recording the iteration.
///
/// Hitting `max_iters` is not an error: the plan comes back with its
/// `marginal_error` for the caller to judge.
pub fn sinkhorn_solve(problem: &TopKProblem) -> (TransportPlan, SinkhornTape) {
    let mut solve = Solve::new(&problem.scores, problem.k);
    let mut lambdas = Vec::new();
    let mut shifts = Vec::new();
    solve.anneal(&problem.config, Some((&mut lambdas, &mut shifts)));
    let plan = solve.plan();
    let tape = SinkhornTape { problem: problem.clone(), lambdas, shifts, plan: plan.clone() };
    (plan, tape)
}

/// Forward-only solve; nothing is recorded.
pub fn sinkhorn_plan(problem: &TopKProblem) -> TransportPlan {
    let mut solve = Solve::new(&problem.scores, problem.k);
    solve.anneal(&problem.config, None);
    solve.plan()
}

pub fn soft_topk(problem: &TopKProblem) -> SoftSelection {
    SoftSelection {
        gamma: sinkhorn_plan(problem).gamma(),
        hard: hard_topk_oracle(problem.scores(), problem.k()).expect("k validated at construction"),
    }
}

/// `γ`, steps taken and final row violation, without building the plan.
///
/// Scores must lie in `[-1, 1]` and `k` in `1..=scores.len()`.
pub(crate) fn soft_topk_gamma(scores: &[f64], k: usize, config: &TopKConfig) -> (Vec<f64>, usize, f64) {
    let mut solve = Solve::new(scores, k);
    solve.anneal(config, None);
    (solve.gamma(), solve.steps, solve.row_error)
}

/// Gradient of a scalar loss with respect to the scores, given
/// `upstream = ∂loss/∂γ`.
///
/// Walks the recorded steps backwards through each column rescaling, row
/// rescaling and between-stage rescale of `h`, then through the kernel and
/// the cost, whose combined effect on the row logits is `4λ a_i`. Clamped
/// scores get a zero gradient.
pub fn soft_topk_backward(tape: &SinkhornTape, upstream: &[f64]) -> Result<Vec<f64>> {
    let problem = &tape.problem;
    let n = problem.len();
    if upstream.len() != n {
        return Err(Error::mismatch(format!(
            "upstream gradient has {} entries, tape has {n} scores",
            upstream.len()
        )));
    }
    let mut grad = vec![0.0; n];
    let steps = tape.iterations();
    if steps == 0 {
        // k == N: the plan does not depend on the scores
        return Ok(grad);
    }
    let scores = &problem.scores;
    let marg = Marginals::new(n, problem.k);
    let mut pairs = vec![[0.0f64; 2]; n];

    // final step: γ_i = σ_i ν₂ / S₂
    let last = steps - 1;
    let lambda = tape.lambdas[last];
    let [_, s2] = logistic_rows(scores, lambda, tape.shifts[last], marg.mu, &mut pairs);
    let weighted: f64 = upstream.iter().zip(&pairs).map(|(u, p)| u * p[1]).sum();
    let s2_bar = -weighted * marg.nu[1] / (s2 * s2);
    let mut shift_bar = 0.0;
    for i in 0..n {
        let sigma_bar = upstream[i] * marg.nu[1] / s2 + marg.mu * s2_bar;
        let logit_bar = sigma_bar * pairs[i][0] * pairs[i][1];
        grad[i] += 4.0 * lambda * logit_bar;
        shift_bar += logit_bar;
    }

    // earlier steps: h' = (h + log ν₂ - log S₂ - log ν₁ + log S₁) · λ_next / λ
    for m in (0..last).rev() {
        let lambda = tape.lambdas[m];
        let h_bar = shift_bar * (tape.lambdas[m + 1] / lambda);
        let [s1, s2] = logistic_rows(scores, lambda, tape.shifts[m], marg.mu, &mut pairs);
        let sigma_bar = marg.mu * (-h_bar / s2 - h_bar / s1);
        let mut logit_sum = 0.0;
        for i in 0..n {
            let logit_bar = sigma_bar * pairs[i][0] * pairs[i][1];
            grad[i] += 4.0 * lambda * logit_bar;
            logit_sum += logit_bar;
        }
        shift_bar = h_bar + logit_sum;
    }

    for (g, &active) in grad.iter_mut().zip(&problem.unclamped) {
        if !active {
            *g = 0.0;
        }
    }
    Ok(grad)
}

struct Marginals {
    mu: f64,
    nu: [f64; 2],
}

impl Marginals {
    fn new(n: usize, k: usize) -> Self {
        let nf = n as f64;
        Self { mu: 1.0 / nf, nu: [(n - k) as f64 / nf, k as f64 / nf] }
    }
}

/// Running state of one solve.
struct Solve<'a> {
    scores: &'a [f64],
    marg: Marginals,
    /// `(1 - σ_i, σ_i)` of the latest step.
    pairs: Vec<[f64; 2]>,
    /// Column masses `(S₁, S₂)` before the latest column rescaling.
    mass: [f64; 2],
    /// Column log ratio after the latest step, at that step's `λ`.
    shift: f64,
    row_error: f64,
    steps: usize,
    full: bool,
}

impl<'a> Solve<'a> {
    fn new(scores: &'a [f64], k: usize) -> Self {
        let n = scores.len();
        Self {
            scores,
            marg: Marginals::new(n, k),
            pairs: vec![[0.0, 1.0]; n],
            mass: [0.0, 1.0],
            shift: 0.0,
            row_error: 0.0,
            steps: 0,
            full: k == n,
        }
    }

    /// One row rescaling followed by one column rescaling at `lambda`, with
    /// `shift` the incoming column log ratio.
    fn step(&mut self, lambda: f64, shift: f64) {
        let marg = &self.marg;
        let mass = logistic_rows(self.scores, lambda, shift, marg.mu, &mut self.pairs);
        let scale = [marg.nu[0] / mass[0], marg.nu[1] / mass[1]];
        self.row_error = self
            .pairs
            .iter()
            .map(|p| marg.mu * (p[0] * scale[0] + p[1] * scale[1] - 1.0).abs())
            .fold(0.0, f64::max);
        self.shift = shift + scale[1].ln() - scale[0].ln();
        self.mass = mass;
        self.steps += 1;
    }

    fn replay(&mut self, lambdas: &[f64]) {
        if self.full {
            return;
        }
        let mut shift = 0.0;
        for (m, &lambda) in lambdas.iter().enumerate() {
            if m > 0 {
                shift = self.shift * (lambda / lambdas[m - 1]);
            }
            self.step(lambda, shift);
        }
    }

    fn anneal(&mut self, config: &TopKConfig, mut record: Option<(&mut Vec<f64>, &mut Vec<f64>)>) {
        if self.full {
            return;
        }
        let max_cost = self.scores.iter().map(|a| (a.abs() + 1.0).powi(2)).fold(0.0, f64::max);
        let mut stages = 0;
        while config.lambda * max_cost / f64::powi(2.0, stages) > ANNEAL_START {
            stages += 1;
        }

        let mut shift = 0.0;
        let mut prev_lambda = None;
        for stage in (0..=stages).rev() {
            let lambda = config.lambda / f64::powi(2.0, stage);
            let left = config.max_iters - self.steps;
            // later stages need at least one step of their own
            let cap = if stage == 0 { left } else { STAGE_ITERS.min(left.saturating_sub(1)) };
            for _ in 0..cap {
                if let Some(prev) = prev_lambda {
                    shift = self.shift * (lambda / prev);
                }
                if let Some((lambdas, shifts)) = record.as_mut() {
                    lambdas.push(lambda);
                    shifts.push(shift);
                }
                self.step(lambda, shift);
                prev_lambda = Some(lambda);
                if self.row_error <= config.tolerance {
                    break;
                }
            }
        }
    }

    fn plan(&self) -> TransportPlan {
        let n = self.scores.len();
        let marg = &self.marg;
        let plan: Vec<[f64; 2]> = if self.full {
            vec![[0.0, marg.mu]; n]
        } else {
            let scale = [marg.nu[0] / self.mass[0], marg.nu[1] / self.mass[1]];
            self.pairs.iter().map(|p| [marg.mu * p[0] * scale[0], marg.mu * p[1] * scale[1]]).collect()
        };
        let marginal_error = marginal_error(&plan, marg);
        TransportPlan { plan, iterations_used: self.steps, marginal_error }
    }

    fn gamma(&self) -> Vec<f64> {
        if self.full {
            return vec![1.0; self.scores.len()];
        }
        let n = self.scores.len() as f64;
        let scale = self.marg.nu[1] / self.mass[1];
        self.pairs.iter().map(|p| n * (self.marg.mu * p[1] * scale)).collect()
    }
}

fn marginal_error(plan: &[[f64; 2]], marg: &Marginals) -> f64 {
    let mut err = 0.0f64;
    let mut cols = [0.0f64; 2];
    for r in plan {
        err = err.max((r[0] + r[1] - marg.mu).abs());
        cols[0] += r[0];
        cols[1] += r[1];
    }
    err.max((cols[0] - marg.nu[0]).abs()).max((cols[1] - marg.nu[1]).abs())
}

/// Fills `out[i] = (1 - σ_i, σ_i)` with `σ_i = sigmoid(4λ a_i + h)` and
/// returns the column masses of the row-normalized plan `μ · out`.
fn logistic_rows(scores: &[f64], lambda: f64, shift: f64, mu: f64, out: &mut [[f64; 2]]) -> [f64; 2] {
    let mut mass = [0.0; 2];
    for (o, &a) in out.iter_mut().zip(scores) {
        *o = logistic_pair(4.0 * lambda * a + shift);
        mass[0] += o[0];
        mass[1] += o[1];
    }
    // a column can only empty out if every logit saturates the same way
    [(mu * mass[0]).max(f64::MIN_POSITIVE), (mu * mass[1]).max(f64::MIN_POSITIVE)]
}

/// `(1 - sigmoid(x), sigmoid(x))` without cancellation or overflow.
fn logistic_pair(x: f64) -> [f64; 2] {
    let e = (-x.abs()).exp();
    let r = 1.0 / (1.0 + e);
    if x >= 0.0 {
        [e * r, r]
    } else {
        [r, e * r]
    }
}
