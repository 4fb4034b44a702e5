//! Two-step parametric estimation and the semiparametric comparator
//! estimators, with standard errors from the stacked-moment sandwich.
//!
//! Working models:
//!
//! * `pi(1 | x; gamma)` — logistic in the pi-spec features;
//! * `mu(z, x; theta)` — logistic in `(z, mu-spec features)`, instrument
//!   coefficient first;
//! * `delta(x; alpha) = alpha' d1(x)` — linear in the delta-spec features;
//! * `tau(z, x; beta) = beta_1 z + beta_2' d2x(x)` — instrument coefficient
//!   first, then the tau-spec features;
//! * `rho(x; xi) = xi' d3(x)` — linear in the rho-spec features.
//!
//! Stage one fits `(gamma, theta)` by separate logistic likelihoods (the
//! joint likelihood of `(A, Z) | X` factorizes). Stage two solves the
//! just-identified stacked moment
//!
//! ```text
//! 0 = Pn [ d1(X) (2Z-1)/pi {(A-mu)(Y - delta A - tau) - rho} ]
//! 0 = Pn [ (Z, d2x(X)) (Y - delta A - tau) ]
//! 0 = Pn [ d3(X) {(A-mu)(Y - delta A) - rho} ]
//! ```
//!
//! with the model-gradient index functions `d1 = delta`-features,
//! `(Z, d2x) = tau`-gradient, `d3 = rho`-features, so the moment count
//! always equals the stage-two parameter count.
//!
//! Estimators:
//!
//! * [`estimate_mr`] — empirical mean of the efficient influence function
//!   at the fitted bundle (multiply robust, locally efficient);
//! * [`estimate_delta1`] — the plug-in with `(delta, tau, rho) = (0, 0, 0)`;
//! * [`estimate_genius`] — G-estimation solving the heteroscedasticity
//!   moment in `alpha` alone;
//! * [`estimate_genius_eff`] — the augmented version solved jointly in
//!   `(alpha, beta)`, reporting the direct-effect coefficient `beta_1`;
//! * [`estimate_benchmarks`] — outcome-regression OLS and two-stage IV
//!   fits that assume a valid instrument.

mod sandwich;

pub use sandwich::sandwich_variance;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::{CovariateSpec, Dataset};
use crate::error::{IvmrError, Result};
use crate::influence::{phi_eff_at, NuisanceBundle, NuisanceValues, TrimPolicy, ZxFn, XFn};
use crate::numerics::{
    child_rng, expit, fit_logistic, fit_ols, kahan_mean, solve_moment_system, FitResult,
    SolverConfig,
};
use crate::report::{Diagnostics, DirectEffect, EstimateReport, EstimatorId};

/// Parametric specifications for the five nuisance functions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WorkingModels {
    pub pi_spec: CovariateSpec,
    /// Covariate features of the treatment propensity; the instrument
    /// column is prepended automatically.
    pub mu_spec: CovariateSpec,
    pub delta_spec: CovariateSpec,
    /// Covariate features of `tau`; the instrument column (coefficient
    /// `beta_1`) is prepended automatically.
    pub tau_spec: CovariateSpec,
    pub rho_spec: CovariateSpec,
}

impl WorkingModels {
    /// Intercept-plus-raw-covariates everywhere except an intercept-only
    /// effect model: the usual starting point for observational data.
    pub fn default_for(p: usize) -> Self {
        WorkingModels {
            pi_spec: CovariateSpec::intercept_and_raw(p),
            mu_spec: CovariateSpec::intercept_and_raw(p),
            delta_spec: CovariateSpec::intercept_only(),
            tau_spec: CovariateSpec::intercept_and_raw(p),
            rho_spec: CovariateSpec::intercept_and_raw(p),
        }
    }
}

/// Solver and trimming configuration for the parametric estimators.
#[derive(Debug, Clone, Copy)]
pub struct MrConfig {
    pub solver: SolverConfig,
    pub pi_clamp: f64,
    pub denom_floor: f64,
    /// Seed of the perturbed restarts used when stage two stalls.
    pub retry_seed: u64,
    pub max_retries: usize,
}

impl Default for MrConfig {
    fn default() -> Self {
        MrConfig {
            solver: SolverConfig::default(),
            pi_clamp: 0.01,
            denom_floor: 1e-3,
            retry_seed: 0,
            max_retries: 5,
        }
    }
}

impl MrConfig {
    fn trim(&self) -> TrimPolicy {
        TrimPolicy::new(self.pi_clamp, self.denom_floor).expect("valid trim settings")
    }
}

/// Stage-one logistic fits.
#[derive(Debug, Clone)]
pub struct Stage1 {
    pub gamma: FitResult,
    pub theta: FitResult,
}

/// Stage-two stacked coefficients split back into model blocks.
#[derive(Debug, Clone)]
pub struct Stage2 {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub xi: DVector<f64>,
    pub fit: FitResult,
    pub retries: usize,
}

// ---------------------------------------------------------------------------
// Feature cache

struct FeatMat {
    data: Vec<f64>,
    width: usize,
}

impl FeatMat {
    fn build(dataset: &Dataset, spec: &CovariateSpec) -> Result<Self> {
        let m = crate::data::apply_spec(dataset, spec)?;
        let n = m.nrows();
        let width = m.ncols();
        let mut data = vec![0.0; n * width];
        for i in 0..n {
            for j in 0..width {
                data[i * width + j] = m[(i, j)];
            }
        }
        Ok(FeatMat { data, width })
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) struct Cache {
    n: usize,
    y: Vec<f64>,
    a: Vec<u8>,
    z: Vec<u8>,
    pi_f: FeatMat,
    mu_f: FeatMat,
    delta_f: FeatMat,
    tau_f: FeatMat,
    rho_f: FeatMat,
}

impl Cache {
    fn build(dataset: &Dataset, models: &WorkingModels) -> Result<Self> {
        Ok(Cache {
            n: dataset.n(),
            y: dataset.y().to_vec(),
            a: dataset.a().to_vec(),
            z: dataset.z().to_vec(),
            pi_f: FeatMat::build(dataset, &models.pi_spec)?,
            mu_f: FeatMat::build(dataset, &models.mu_spec)?,
            delta_f: FeatMat::build(dataset, &models.delta_spec)?,
            tau_f: FeatMat::build(dataset, &models.tau_spec)?,
            rho_f: FeatMat::build(dataset, &models.rho_spec)?,
        })
    }

    fn q_gamma(&self) -> usize {
        self.pi_f.width
    }

    fn q_theta(&self) -> usize {
        1 + self.mu_f.width
    }

    /// Nuisance values at row `i` under coefficient blocks. Empty blocks
    /// evaluate to zero (used by the plug-in estimator where
    /// `delta = tau = rho = 0`).
    #[inline]
    fn values(
        &self,
        i: usize,
        gamma: &[f64],
        theta: &[f64],
        alpha: &[f64],
        beta: &[f64],
        xi: &[f64],
    ) -> NuisanceValues {
        let pi1 = expit(dot(gamma, self.pi_f.row(i)));
        let mu_lin = dot(&theta[1..], self.mu_f.row(i));
        let mu1 = expit(theta[0] + mu_lin);
        let mu0 = expit(mu_lin);
        let delta = if alpha.is_empty() {
            0.0
        } else {
            dot(alpha, self.delta_f.row(i))
        };
        let tau = if beta.is_empty() {
            0.0
        } else {
            beta[0] * f64::from(self.z[i]) + dot(&beta[1..], self.tau_f.row(i))
        };
        let rho = if xi.is_empty() {
            0.0
        } else {
            dot(xi, self.rho_f.row(i))
        };
        NuisanceValues {
            pi1,
            mu1,
            mu0,
            delta,
            tau,
            rho,
        }
    }
}

// ---------------------------------------------------------------------------
// Moment stacks

/// Content of the G1-style block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum G1Kind {
    /// `(A - mu)(Y - delta A)` — the plain G-estimation moment.
    NoTauNoRho,
    /// `(A - mu)(Y - delta A - tau)` — the augmented moment.
    NoRho,
    /// `(A - mu)(Y - delta A - tau) - rho` — the full moment.
    Full,
}

/// Final stacked coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LastMoment {
    /// `phi_eff(O; psi) - Delta`.
    PhiEff,
    /// `delta(X; alpha) - Delta`.
    DeltaBar,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    g1: Option<G1Kind>,
    g2: bool,
    g3: bool,
    last: LastMoment,
}

impl Shape {
    fn mr() -> Self {
        Shape {
            g1: Some(G1Kind::Full),
            g2: true,
            g3: true,
            last: LastMoment::PhiEff,
        }
    }

    fn delta1() -> Self {
        Shape {
            g1: None,
            g2: false,
            g3: false,
            last: LastMoment::PhiEff,
        }
    }

    fn genius() -> Self {
        Shape {
            g1: Some(G1Kind::NoTauNoRho),
            g2: false,
            g3: false,
            last: LastMoment::DeltaBar,
        }
    }

    fn genius_eff() -> Self {
        Shape {
            g1: Some(G1Kind::NoRho),
            g2: true,
            g3: false,
            last: LastMoment::DeltaBar,
        }
    }

    fn q_alpha(&self, cache: &Cache) -> usize {
        if self.g1.is_some() {
            cache.delta_f.width
        } else {
            0
        }
    }

    fn q_beta(&self, cache: &Cache) -> usize {
        if self.g2 {
            1 + cache.tau_f.width
        } else {
            0
        }
    }

    fn q_xi(&self, cache: &Cache) -> usize {
        if self.g3 {
            cache.rho_f.width
        } else {
            0
        }
    }
}

/// Writes the stage-two moment contribution of row `i` into `out`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn stage2_row(
    cache: &Cache,
    shape: &Shape,
    i: usize,
    v: &NuisanceValues,
    trim: &TrimPolicy,
    out: &mut [f64],
) {
    let y = cache.y[i];
    let af = f64::from(cache.a[i]);
    let z = cache.z[i];
    let sign = if z == 1 { 1.0 } else { -1.0 };
    let mut k = 0;
    if let Some(kind) = shape.g1 {
        let pi = trim.trim_pi(v.pi_obs(z));
        let resid = match kind {
            G1Kind::NoTauNoRho => (af - v.mu_obs(z)) * (y - v.delta * af),
            G1Kind::NoRho => (af - v.mu_obs(z)) * (y - v.delta * af - v.tau),
            G1Kind::Full => (af - v.mu_obs(z)) * (y - v.delta * af - v.tau) - v.rho,
        };
        let w = sign * resid / pi;
        for &f in cache.delta_f.row(i) {
            out[k] = f * w;
            k += 1;
        }
    }
    if shape.g2 {
        let resid = y - v.delta * af - v.tau;
        out[k] = f64::from(z) * resid;
        k += 1;
        for &f in cache.tau_f.row(i) {
            out[k] = f * resid;
            k += 1;
        }
    }
    if shape.g3 {
        let resid = (af - v.mu_obs(z)) * (y - v.delta * af) - v.rho;
        for &f in cache.rho_f.row(i) {
            out[k] = f * resid;
            k += 1;
        }
    }
    debug_assert_eq!(k, out.len());
}

/// Kahan-compensated column means of per-row contributions.
struct MeanAccum {
    sums: Vec<f64>,
    comps: Vec<f64>,
}

impl MeanAccum {
    fn new(m: usize) -> Self {
        MeanAccum {
            sums: vec![0.0; m],
            comps: vec![0.0; m],
        }
    }

    #[inline]
    fn add(&mut self, row: &[f64]) {
        for (j, &v) in row.iter().enumerate() {
            let y = v - self.comps[j];
            let t = self.sums[j] + y;
            self.comps[j] = (t - self.sums[j]) - y;
            self.sums[j] = t;
        }
    }

    fn mean(self, n: usize) -> DVector<f64> {
        DVector::from_iterator(self.sums.len(), self.sums.into_iter().map(|s| s / n as f64))
    }
}

fn split3<'a>(
    psi: &'a [f64],
    qa: usize,
    qb: usize,
    qx: usize,
) -> (&'a [f64], &'a [f64], &'a [f64]) {
    (&psi[..qa], &psi[qa..qa + qb], &psi[qa + qb..qa + qb + qx])
}

/// Mean of the stage-two moments as a function of `(alpha, beta, xi)`.
fn stage2_mean(
    cache: &Cache,
    shape: &Shape,
    gamma: &[f64],
    theta: &[f64],
    psi: &DVector<f64>,
    trim: &TrimPolicy,
) -> DVector<f64> {
    let qa = shape.q_alpha(cache);
    let qb = shape.q_beta(cache);
    let qx = shape.q_xi(cache);
    let m = qa + qb + qx;
    let (alpha, beta, xi) = split3(psi.as_slice(), qa, qb, qx);
    let mut acc = MeanAccum::new(m);
    let mut row = vec![0.0; m];
    for i in 0..cache.n {
        let v = cache.values(i, gamma, theta, alpha, beta, xi);
        stage2_row(cache, shape, i, &v, trim, &mut row);
        acc.add(&row);
    }
    acc.mean(cache.n)
}

/// Full stacked moment (scores, stage-two block, final coordinate) as a
/// function of the complete parameter vector including `Delta` last.
fn full_stack_mean(
    cache: &Cache,
    shape: &Shape,
    psi_full: &DVector<f64>,
    trim: &TrimPolicy,
) -> DVector<f64> {
    let qg = cache.q_gamma();
    let qt = cache.q_theta();
    let qa = shape.q_alpha(cache);
    let qb = shape.q_beta(cache);
    let qx = shape.q_xi(cache);
    let m = qg + qt + qa + qb + qx + 1;
    let s = psi_full.as_slice();
    let gamma = &s[..qg];
    let theta = &s[qg..qg + qt];
    let (alpha, beta, xi) = split3(&s[qg + qt..], qa, qb, qx);
    let delta_hat = s[m - 1];

    let mut acc = MeanAccum::new(m);
    let mut row = vec![0.0; m];
    for i in 0..cache.n {
        let v = cache.values(i, gamma, theta, alpha, beta, xi);
        full_stack_row(cache, shape, i, &v, gamma, delta_hat, trim, &mut row);
        acc.add(&row);
    }
    let _ = gamma;
    acc.mean(cache.n)
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn full_stack_row(
    cache: &Cache,
    shape: &Shape,
    i: usize,
    v: &NuisanceValues,
    _gamma: &[f64],
    delta_hat: f64,
    trim: &TrimPolicy,
    row: &mut [f64],
) {
    let qg = cache.q_gamma();
    let qt = cache.q_theta();
    let z = cache.z[i];
    let zf = f64::from(z);
    let af = f64::from(cache.a[i]);
    let y = cache.y[i];

    // Stage-one scores.
    let rz = zf - v.pi1;
    for (j, &f) in cache.pi_f.row(i).iter().enumerate() {
        row[j] = f * rz;
    }
    let ra = af - v.mu_obs(z);
    row[qg] = zf * ra;
    for (j, &f) in cache.mu_f.row(i).iter().enumerate() {
        row[qg + 1 + j] = f * ra;
    }

    // Stage-two block.
    let qa = shape.q_alpha(cache);
    let qb = shape.q_beta(cache);
    let qx = shape.q_xi(cache);
    stage2_row(
        cache,
        shape,
        i,
        v,
        trim,
        &mut row[qg + qt..qg + qt + qa + qb + qx],
    );

    // Final coordinate.
    let last = match shape.last {
        LastMoment::PhiEff => phi_eff_at(y, cache.a[i], z, v, trim) - delta_hat,
        LastMoment::DeltaBar => v.delta - delta_hat,
    };
    row[qg + qt + qa + qb + qx] = last;
}

// ---------------------------------------------------------------------------
// Stage fits

/// Fit `(gamma, theta)` by logistic regressions of Z on the pi-features and
/// of A on `(Z, mu-features)`.
pub fn fit_stage1(dataset: &Dataset, models: &WorkingModels, config: &MrConfig) -> Result<Stage1> {
    dataset.require_both_arms()?;
    let cache = Cache::build(dataset, models)?;
    fit_stage1_cached(&cache, config)
}

fn fit_stage1_cached(cache: &Cache, config: &MrConfig) -> Result<Stage1> {
    let n = cache.n;
    let pi_design = DMatrix::from_fn(n, cache.pi_f.width, |i, j| cache.pi_f.row(i)[j]);
    let z: Vec<f64> = cache.z.iter().map(|&v| f64::from(v)).collect();
    let gamma = fit_logistic(&pi_design, &z, &config.solver)?;

    let mut mu_design = DMatrix::zeros(n, 1 + cache.mu_f.width);
    for i in 0..n {
        mu_design[(i, 0)] = f64::from(cache.z[i]);
        for (j, &f) in cache.mu_f.row(i).iter().enumerate() {
            mu_design[(i, 1 + j)] = f;
        }
    }
    let a: Vec<f64> = cache.a.iter().map(|&v| f64::from(v)).collect();
    let theta = fit_logistic(&mu_design, &a, &config.solver)?;
    Ok(Stage1 { gamma, theta })
}

/// Fit `(alpha, beta, xi)` given stage-one coefficients, starting from an
/// outcome-regression initialization with `xi = 0` and restarting from
/// seeded perturbations if the solver stalls.
pub fn fit_stage2(
    dataset: &Dataset,
    models: &WorkingModels,
    stage1: &Stage1,
    config: &MrConfig,
) -> Result<Stage2> {
    let cache = Cache::build(dataset, models)?;
    let trim = config.trim();
    fit_stage2_cached(&cache, &Shape::mr(), stage1, config, &trim)
}

fn ols_init(cache: &Cache, shape: &Shape) -> Result<DVector<f64>> {
    let qa = shape.q_alpha(cache);
    let qb = shape.q_beta(cache);
    let qx = shape.q_xi(cache);
    let n = cache.n;
    if n < qa + qb + qx {
        return Err(IvmrError::RankDeficient {
            rank: n,
            cols: qa + qb + qx,
        });
    }
    let mut init = DVector::zeros(qa + qb + qx);
    if qa + qb == 0 {
        return Ok(init);
    }
    // Regress Y on (A * delta-features, Z, tau-features); the alpha block
    // initializes delta, the rest initializes tau.
    let cols = qa + qb;
    let mut design = DMatrix::zeros(n, cols);
    for i in 0..n {
        let af = f64::from(cache.a[i]);
        let mut c = 0;
        if qa > 0 {
            for &f in cache.delta_f.row(i) {
                design[(i, c)] = af * f;
                c += 1;
            }
        }
        if qb > 0 {
            design[(i, c)] = f64::from(cache.z[i]);
            c += 1;
            for &f in cache.tau_f.row(i) {
                design[(i, c)] = f;
                c += 1;
            }
        }
    }
    let fit = fit_ols(&design, &cache.y)?;
    for j in 0..cols {
        init[j] = fit.coefficients[j];
    }
    Ok(init)
}

fn fit_stage2_cached(
    cache: &Cache,
    shape: &Shape,
    stage1: &Stage1,
    config: &MrConfig,
    trim: &TrimPolicy,
) -> Result<Stage2> {
    let qa = shape.q_alpha(cache);
    let qb = shape.q_beta(cache);
    let qx = shape.q_xi(cache);
    let gamma = stage1.gamma.coefficients.as_slice();
    let theta = stage1.theta.coefficients.as_slice();
    let init = ols_init(cache, shape)?;
    if qa + qb + qx == 0 {
        return Ok(Stage2 {
            alpha: DVector::zeros(0),
            beta: DVector::zeros(0),
            xi: DVector::zeros(0),
            fit: FitResult {
                coefficients: DVector::zeros(0),
                converged: true,
                iterations: 0,
                final_gradient_norm: 0.0,
                separation: false,
            },
            retries: 0,
        });
    }

    let g = |psi: &DVector<f64>| stage2_mean(cache, shape, gamma, theta, psi, trim);
    let mut retries = 0;
    let mut last_err = None;
    let mut start = init.clone();
    loop {
        match solve_moment_system(&g, &start, &config.solver) {
            Ok(fit) => {
                let s = fit.coefficients.as_slice();
                let (alpha, beta, xi) = split3(s, qa, qb, qx);
                return Ok(Stage2 {
                    alpha: DVector::from_column_slice(alpha),
                    beta: DVector::from_column_slice(beta),
                    xi: DVector::from_column_slice(xi),
                    fit,
                    retries,
                });
            }
            Err(e) => {
                if retries >= config.max_retries {
                    return Err(last_err.unwrap_or(e));
                }
                last_err = Some(e);
                let mut rng = child_rng(config.retry_seed, retries as u64 + 1);
                start = DVector::from_iterator(
                    init.len(),
                    init.iter()
                        .map(|&v| v + rng.gen_range(-0.5..0.5) * (1.0 + v.abs())),
                );
                retries += 1;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Reports

struct StackedFit {
    stage1: Stage1,
    stage2: Stage2,
    estimate: f64,
    psi_full: DVector<f64>,
}

fn solve_shape(
    cache: &Cache,
    shape: &Shape,
    config: &MrConfig,
    trim: &TrimPolicy,
) -> Result<StackedFit> {
    let stage1 = fit_stage1_cached(cache, config)?;
    if !stage1.gamma.converged || !stage1.theta.converged {
        let norm = stage1
            .gamma
            .final_gradient_norm
            .max(stage1.theta.final_gradient_norm);
        if stage1.gamma.separation || stage1.theta.separation {
            return Err(IvmrError::SeparationDetected {
                norm: stage1
                    .gamma
                    .coefficients
                    .amax()
                    .max(stage1.theta.coefficients.amax()),
            });
        }
        return Err(IvmrError::NoConvergence {
            iterations: config.solver.max_iter,
            residual: norm,
        });
    }
    let stage2 = fit_stage2_cached(cache, shape, &stage1, config, trim)?;

    let gamma = stage1.gamma.coefficients.as_slice();
    let theta = stage1.theta.coefficients.as_slice();
    let alpha = stage2.alpha.as_slice();
    let beta = stage2.beta.as_slice();
    let xi = stage2.xi.as_slice();

    let estimates: Vec<f64> = (0..cache.n)
        .map(|i| {
            let v = cache.values(i, gamma, theta, alpha, beta, xi);
            match shape.last {
                LastMoment::PhiEff => phi_eff_at(cache.y[i], cache.a[i], cache.z[i], &v, trim),
                LastMoment::DeltaBar => v.delta,
            }
        })
        .collect();
    let estimate = kahan_mean(&estimates);

    let mut psi_full =
        DVector::zeros(gamma.len() + theta.len() + alpha.len() + beta.len() + xi.len() + 1);
    let mut k = 0;
    for block in [gamma, theta, alpha, beta, xi] {
        for &v in block {
            psi_full[k] = v;
            k += 1;
        }
    }
    psi_full[k] = estimate;

    Ok(StackedFit {
        stage1,
        stage2,
        estimate,
        psi_full,
    })
}

fn report_for_shape(
    dataset: &Dataset,
    models: &WorkingModels,
    shape: Shape,
    id: EstimatorId,
    config: &MrConfig,
) -> Result<EstimateReport> {
    dataset.require_both_arms()?;
    let cache = Cache::build(dataset, models)?;
    let trim = config.trim();
    let fitted = solve_shape(&cache, &shape, config, &trim)?;

    // Sandwich over the full stack; Delta's variance is the last diagonal.
    let qg = cache.q_gamma();
    let qt = cache.q_theta();
    let qa = shape.q_alpha(&cache);
    let qb = shape.q_beta(&cache);
    let qx = shape.q_xi(&cache);
    let m = qg + qt + qa + qb + qx + 1;

    let gamma = fitted.stage1.gamma.coefficients.as_slice();
    let theta = fitted.stage1.theta.coefficients.as_slice();
    let alpha = fitted.stage2.alpha.as_slice();
    let beta = fitted.stage2.beta.as_slice();
    let xi = fitted.stage2.xi.as_slice();

    let mut contributions = DMatrix::zeros(cache.n, m);
    {
        let mut row = vec![0.0; m];
        for i in 0..cache.n {
            let v = cache.values(i, gamma, theta, alpha, beta, xi);
            full_stack_row(
                &cache,
                &shape,
                i,
                &v,
                gamma,
                fitted.estimate,
                &trim,
                &mut row,
            );
            for (j, &val) in row.iter().enumerate() {
                contributions[(i, j)] = val;
            }
        }
    }
    let mean_fn = |psi: &DVector<f64>| full_stack_mean(&cache, &shape, psi, &trim);
    let cov = sandwich_variance(
        &mean_fn,
        &contributions,
        &fitted.psi_full,
        config.solver.jacobian_step,
    )?;
    let var = cov[(m - 1, m - 1)].max(0.0);
    let std_error = (var / cache.n as f64).sqrt();

    let mut report = EstimateReport::new(id, fitted.estimate, std_error);
    if qb > 0 {
        let b1_index = qg + qt + qa;
        let b1_var = cov[(b1_index, b1_index)].max(0.0);
        report = report.with_aux(DirectEffect {
            coefficient: fitted.psi_full[b1_index],
            std_error: (b1_var / cache.n as f64).sqrt(),
        });
    }
    let diagnostics = Diagnostics {
        solver_iterations: fitted.stage2.fit.iterations
            + fitted.stage1.gamma.iterations
            + fitted.stage1.theta.iterations,
        converged: fitted.stage2.fit.converged,
        separation: fitted.stage1.gamma.separation || fitted.stage1.theta.separation,
        retries: fitted.stage2.retries,
        trim: trim.counts(),
        winsorized: 0,
        post_selection: false,
    };
    Ok(report.with_diagnostics(diagnostics))
}

/// Multiply robust locally efficient estimate: `Pn phi_eff` at the fitted
/// parametric bundle, sandwich standard error over the full stack.
pub fn estimate_mr(
    dataset: &Dataset,
    models: &WorkingModels,
    config: &MrConfig,
) -> Result<EstimateReport> {
    report_for_shape(dataset, models, Shape::mr(), EstimatorId::Mr, config)
}

/// Plug-in estimate with `(delta, tau, rho) = (0, 0, 0)`: `Pn phi1`.
pub fn estimate_delta1(
    dataset: &Dataset,
    models: &WorkingModels,
    config: &MrConfig,
) -> Result<EstimateReport> {
    report_for_shape(dataset, models, Shape::delta1(), EstimatorId::Delta1, config)
}

/// G-estimation solving the heteroscedasticity moment in `alpha`;
/// estimate is `Pn delta(X; alpha_hat)`.
pub fn estimate_genius(
    dataset: &Dataset,
    models: &WorkingModels,
    config: &MrConfig,
) -> Result<EstimateReport> {
    report_for_shape(dataset, models, Shape::genius(), EstimatorId::Genius, config)
}

/// Augmented G-estimation solved jointly in `(alpha, beta)`; reports the
/// direct-effect coefficient `beta_1` in `aux`.
pub fn estimate_genius_eff(
    dataset: &Dataset,
    models: &WorkingModels,
    config: &MrConfig,
) -> Result<EstimateReport> {
    report_for_shape(
        dataset,
        models,
        Shape::genius_eff(),
        EstimatorId::GeniusEff,
        config,
    )
}

/// Fitted parametric nuisance bundle, for sharing the influence-function
/// code path with the machine-learning estimators.
pub fn parametric_bundle(
    models: &WorkingModels,
    stage1: &Stage1,
    stage2: &Stage2,
) -> NuisanceBundle {
    let pi_spec = models.pi_spec.clone();
    let gamma: Vec<f64> = stage1.gamma.coefficients.iter().copied().collect();
    let pi1: XFn = std::sync::Arc::new(move |x: &[f64]| expit(dot(&gamma, &pi_spec.features(x))));

    let mu_spec = models.mu_spec.clone();
    let theta: Vec<f64> = stage1.theta.coefficients.iter().copied().collect();
    let mu: ZxFn = std::sync::Arc::new(move |z: u8, x: &[f64]| {
        expit(theta[0] * f64::from(z) + dot(&theta[1..], &mu_spec.features(x)))
    });

    let delta_spec = models.delta_spec.clone();
    let alpha: Vec<f64> = stage2.alpha.iter().copied().collect();
    let delta: XFn = std::sync::Arc::new(move |x: &[f64]| {
        if alpha.is_empty() {
            0.0
        } else {
            dot(&alpha, &delta_spec.features(x))
        }
    });

    let tau_spec = models.tau_spec.clone();
    let beta: Vec<f64> = stage2.beta.iter().copied().collect();
    let tau: ZxFn = std::sync::Arc::new(move |z: u8, x: &[f64]| {
        if beta.is_empty() {
            0.0
        } else {
            beta[0] * f64::from(z) + dot(&beta[1..], &tau_spec.features(x))
        }
    });

    let rho_spec = models.rho_spec.clone();
    let xi: Vec<f64> = stage2.xi.iter().copied().collect();
    let rho: XFn = std::sync::Arc::new(move |x: &[f64]| {
        if xi.is_empty() {
            0.0
        } else {
            dot(&xi, &rho_spec.features(x))
        }
    });

    NuisanceBundle::new(pi1, mu, delta, tau, rho)
}

// ---------------------------------------------------------------------------
// Benchmarks assuming a valid instrument

/// Outcome-regression OLS and two-stage IV benchmark estimates.
///
/// OLS fits `E(Y | A, X) = delta(X; alpha) A + b' d2x(X)` by least squares
/// and reports `Pn delta(X; alpha_hat)`. TSIV fits the treatment propensity
/// `mu(Z, X; theta)` and then `E(Y | Z, X) = delta(X; alpha) mu + b' d2x(X)`
/// by least squares in `(alpha, b)`. Standard errors come from the stacked
/// sandwich of each fit.
pub fn estimate_benchmarks(
    dataset: &Dataset,
    models: &WorkingModels,
    config: &MrConfig,
) -> Result<(EstimateReport, EstimateReport)> {
    dataset.require_both_arms()?;
    let cache = Cache::build(dataset, models)?;
    let ols = benchmark_ols(&cache, config)?;
    let tsiv = benchmark_tsiv(&cache, config)?;
    Ok((ols, tsiv))
}

fn benchmark_ols(cache: &Cache, config: &MrConfig) -> Result<EstimateReport> {
    let n = cache.n;
    let qa = cache.delta_f.width;
    let qb = cache.tau_f.width;
    let mut design = DMatrix::zeros(n, qa + qb);
    for i in 0..n {
        let af = f64::from(cache.a[i]);
        for (j, &f) in cache.delta_f.row(i).iter().enumerate() {
            design[(i, j)] = af * f;
        }
        for (j, &f) in cache.tau_f.row(i).iter().enumerate() {
            design[(i, qa + j)] = f;
        }
    }
    let fit = fit_ols(&design, &cache.y)?;
    let coef = fit.coefficients.clone();
    let deltas: Vec<f64> = (0..n)
        .map(|i| dot(&coef.as_slice()[..qa], cache.delta_f.row(i)))
        .collect();
    let estimate = kahan_mean(&deltas);

    // Stacked moments: least-squares normal equations plus delta - Delta.
    let m = qa + qb + 1;
    let mut psi = DVector::zeros(m);
    for j in 0..qa + qb {
        psi[j] = coef[j];
    }
    psi[m - 1] = estimate;

    let row_fn = |i: usize, p: &[f64], row: &mut [f64]| {
        let af = f64::from(cache.a[i]);
        let delta_i = dot(&p[..qa], cache.delta_f.row(i));
        let tau_i = dot(&p[qa..qa + qb], cache.tau_f.row(i));
        let resid = cache.y[i] - delta_i * af - tau_i;
        for (j, &f) in cache.delta_f.row(i).iter().enumerate() {
            row[j] = af * f * resid;
        }
        for (j, &f) in cache.tau_f.row(i).iter().enumerate() {
            row[qa + j] = f * resid;
        }
        row[m - 1] = delta_i - p[m - 1];
    };
    benchmark_report(cache, EstimatorId::Ols, psi, m, row_fn, config, 0)
}

fn benchmark_tsiv(cache: &Cache, config: &MrConfig) -> Result<EstimateReport> {
    let n = cache.n;
    let config1 = config;
    let stage1 = fit_stage1_cached(cache, config1)?;
    if !stage1.theta.converged {
        return Err(IvmrError::NoConvergence {
            iterations: config.solver.max_iter,
            residual: stage1.theta.final_gradient_norm,
        });
    }
    let theta = stage1.theta.coefficients.clone();
    let qt = theta.len();
    let qa = cache.delta_f.width;
    let qb = cache.tau_f.width;

    let mu_at = |i: usize, th: &[f64]| -> f64 {
        expit(th[0] * f64::from(cache.z[i]) + dot(&th[1..], cache.mu_f.row(i)))
    };

    let mut design = DMatrix::zeros(n, qa + qb);
    for i in 0..n {
        let mu = mu_at(i, theta.as_slice());
        for (j, &f) in cache.delta_f.row(i).iter().enumerate() {
            design[(i, j)] = mu * f;
        }
        for (j, &f) in cache.tau_f.row(i).iter().enumerate() {
            design[(i, qa + j)] = f;
        }
    }
    let fit = fit_ols(&design, &cache.y)?;
    let coef = fit.coefficients.clone();
    let deltas: Vec<f64> = (0..n)
        .map(|i| dot(&coef.as_slice()[..qa], cache.delta_f.row(i)))
        .collect();
    let estimate = kahan_mean(&deltas);

    // Stack: theta scores, second-stage normal equations, delta - Delta.
    let m = qt + qa + qb + 1;
    let mut psi = DVector::zeros(m);
    for j in 0..qt {
        psi[j] = theta[j];
    }
    for j in 0..qa + qb {
        psi[qt + j] = coef[j];
    }
    psi[m - 1] = estimate;

    let row_fn = |i: usize, p: &[f64], row: &mut [f64]| {
        let th = &p[..qt];
        let mu = mu_at(i, th);
        let ra = f64::from(cache.a[i]) - mu;
        row[0] = f64::from(cache.z[i]) * ra;
        for (j, &f) in cache.mu_f.row(i).iter().enumerate() {
            row[1 + j] = f * ra;
        }
        let delta_i = dot(&p[qt..qt + qa], cache.delta_f.row(i));
        let tau_i = dot(&p[qt + qa..qt + qa + qb], cache.tau_f.row(i));
        let resid = cache.y[i] - delta_i * mu - tau_i;
        for (j, &f) in cache.delta_f.row(i).iter().enumerate() {
            row[qt + j] = mu * f * resid;
        }
        for (j, &f) in cache.tau_f.row(i).iter().enumerate() {
            row[qt + qa + j] = f * resid;
        }
        row[m - 1] = delta_i - p[m - 1];
    };
    benchmark_report(
        cache,
        EstimatorId::Tsiv,
        psi,
        m,
        row_fn,
        config,
        stage1.theta.iterations,
    )
}

fn benchmark_report<F>(
    cache: &Cache,
    id: EstimatorId,
    psi: DVector<f64>,
    m: usize,
    row_fn: F,
    config: &MrConfig,
    iterations: usize,
) -> Result<EstimateReport>
where
    F: Fn(usize, &[f64], &mut [f64]),
{
    let n = cache.n;
    let mut contributions = DMatrix::zeros(n, m);
    let mut row = vec![0.0; m];
    for i in 0..n {
        row_fn(i, psi.as_slice(), &mut row);
        for (j, &v) in row.iter().enumerate() {
            contributions[(i, j)] = v;
        }
    }
    let mean_fn = |p: &DVector<f64>| {
        let mut acc = MeanAccum::new(m);
        let mut row = vec![0.0; m];
        for i in 0..n {
            row_fn(i, p.as_slice(), &mut row);
            acc.add(&row);
        }
        acc.mean(n)
    };
    let cov = sandwich_variance(&mean_fn, &contributions, &psi, config.solver.jacobian_step)?;
    let var = cov[(m - 1, m - 1)].max(0.0);
    let estimate = psi[m - 1];
    let report = EstimateReport::new(id, estimate, (var / n as f64).sqrt()).with_diagnostics(
        Diagnostics {
            solver_iterations: iterations,
            converged: true,
            ..Diagnostics::default()
        },
    );
    Ok(report)
}
