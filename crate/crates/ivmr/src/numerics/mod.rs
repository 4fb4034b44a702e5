//! Shared numerical kernels: generalized linear model fits, nonlinear
//! moment-system solving, numeric differentiation, normal-distribution
//! primitives and seeded random streams.

mod glm;
mod normal;
mod rng;
mod solver;

pub use glm::{fit_logistic, fit_ols};
pub use normal::{norm_cdf, norm_pdf, norm_quantile, sample_truncated_normal};
pub use rng::{child_rng, child_seed, rng_from_seed, splitmix64, StreamRng};
pub use solver::{numeric_jacobian, solve_moment_system};

use nalgebra::DVector;

/// Outcome of an iterative fit or solve.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub coefficients: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Max-abs value of the score / moment vector at the returned point.
    pub final_gradient_norm: f64,
    /// Set when a logistic fit drifted past the separation guard.
    pub separation: bool,
}

/// Tolerances for iterative solvers.
///
/// `tol` applies to the max-abs moment (or mean score) value; `jacobian_step`
/// is relative, scaled per coordinate by `max(1, |psi_j|)`; line-search
/// damping halves the Newton step down to a floor of `2^-20`.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub jacobian_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-8,
            max_iter: 100,
            jacobian_step: 1e-6,
        }
    }
}

pub(crate) const DAMPING_FLOOR: f64 = 9.5367431640625e-7; // 2^-20

/// Compensated (Kahan) sum; used wherever aggregation order must not
/// perturb results across permutations or thread counts.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

pub fn kahan_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    kahan_sum(values.iter().copied()) / values.len() as f64
}

/// Mean and sample standard deviation (n-1 divisor).
pub fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = kahan_mean(values);
    if n < 2 {
        return (mean, 0.0);
    }
    let ss = kahan_sum(values.iter().map(|v| (v - mean) * (v - mean)));
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Median of a slice (average of middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn expit(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}
