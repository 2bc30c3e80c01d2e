//! Reverse-mode gradients of the soft top-k operator against central
//! finite differences on random instances.
//!
//! Each trial draws scores uniformly from `[-0.99, 0.99]` (so that a
//! perturbed score never hits the clamp) and an upstream gradient from
//! `[-1, 1]`, solves once, and compares the backward pass with
//! `(f(a + h e_i) - f(a - h e_i)) / 2h` where `f` replays the recorded
//! iteration schedule. The error of a component is
//! `|g - fd| / max(|g|, |fd|)`, taken over components where that maximum
//! exceeds [`MAGNITUDE_FLOOR`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sinkhorn::{sinkhorn_solve, soft_topk_backward, TopKConfig, TopKProblem};

pub const PASS_THRESHOLD: f64 = 1e-3;
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub n: usize,
    pub k: usize,
    pub topk: TopKConfig,
    pub trials: usize,
    pub seed: u64,
    /// Finite-difference step.
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { n: 8, k: 3, topk: TopKConfig { lambda: 20.0, ..TopKConfig::default() }, trials: 50, seed: 0, step: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub trials: usize,
    /// Components above the magnitude floor.
    pub compared: usize,
    pub worst_relative_error: f64,
    /// Largest `|g|` seen in any trial.
    pub max_gradient: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.worst_relative_error < PASS_THRESHOLD
    }
}

pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    config.topk.validate()?;
    if config.n == 0 || config.k == 0 || config.k > config.n {
        return Err(Error::param(format!("need 1 <= k <= N, got N = {}, k = {}", config.n, config.k)));
    }
    if config.trials == 0 {
        return Err(Error::param("trials must be at least 1"));
    }
    if !(config.step.is_finite() && config.step > 0.0 && config.step < 0.01) {
        return Err(Error::param(format!("step must lie in (0, 0.01), got {}", config.step)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradcheckReport { trials: config.trials, compared: 0, worst_relative_error: 0.0, max_gradient: 0.0 };
    for _ in 0..config.trials {
        let scores: Vec<f64> = (0..config.n).map(|_| rng.gen_range(-0.99..=0.99)).collect();
        let upstream: Vec<f64> = (0..config.n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let problem = TopKProblem::new(scores.clone(), config.k, config.topk)?;
        let (_, tape) = sinkhorn_solve(&problem);
        let grad = soft_topk_backward(&tape, &upstream)?;
        let loss = |s: &[f64]| -> Result<f64> {
            Ok(tape.gamma_at(s)?.iter().zip(&upstream).map(|(g, u)| g * u).sum())
        };
        for (i, &g) in grad.iter().enumerate() {
            let mut plus = scores.clone();
            let mut minus = scores.clone();
            plus[i] += config.step;
            minus[i] -= config.step;
            let fd = (loss(&plus)? - loss(&minus)?) / (2.0 * config.step);
            report.max_gradient = report.max_gradient.max(g.abs());
            let scale = g.abs().max(fd.abs());
            if scale > MAGNITUDE_FLOOR {
                report.compared += 1;
                report.worst_relative_error = report.worst_relative_error.max((g - fd).abs() / scale);
            }
        }
    }
    Ok(report)
}
