//! Simulation data-generating process, misspecification scenarios and the
//! Monte Carlo harness.
//!
//! Covariates `X_1..X_5` are independent standard uniforms and enter the
//! structural equations through the steep logistic transform `Xs_k`
//! ([`crate::data::logistic_bump`]). A latent confounder `U` follows a
//! truncated normal on `[-0.5, 0.5]` whose parent variance depends on the
//! covariates. The instrument, treatment and outcome follow
//!
//! ```text
//! P(Z=1|X)      = expit(0.8 + Xs1 - .2 Xs2 - .2 Xs3 - .2 Xs4 + .1 Xs5)
//! P(A=1|Z,U,X)  = expit(-2 + 1.5 Z + .6 Xs1 - .2 Xs2 - .2 Xs3 - .1 Xs4 + .1 Xs5) + .1 U
//! Y             = -2 + (2 Xs1 + .5 Xs2 + .5 Xs3) A
//!                 + 2 Xs1 + .5 Xs2 + .2 Xs3 + .1 Xs4 + .1 Xs5 - 2 Z + U + N(0,1)
//! ```
//!
//! so the instrument has a direct effect on the outcome and the true ATE is
//! `E(2 Xs1 + .5 Xs2 + .5 Xs3) = 1.5`. Misspecified working models replace
//! `Xs_k` by the quadratic `(X_k - 0.5)^2` in the affected nuisances.

use crate::data::{logistic_bump, ColumnTransform, CovariateSpec, Dataset, Observation};
use crate::dml::{estimate_dml, CrossFitPlan};
use crate::error::Result;
use crate::influence::{NuisanceBundle, TrimPolicy, XFn, ZxFn};
use crate::learners::{LearnerKind, LearnerParams, NuisanceLearnerSet};
use crate::mr::{
    estimate_benchmarks, estimate_delta1, estimate_genius, estimate_genius_eff, estimate_mr,
    MrConfig, WorkingModels,
};
use crate::numerics::{
    child_seed, expit, kahan_mean, mean_and_sd, median, norm_cdf, norm_pdf, norm_quantile,
    sample_truncated_normal,
};
use crate::par;
use crate::report::EstimateReport;
use crate::sml::{select_and_estimate, CandidateLists, RiskCriterion, SmlConfig};
use rand::Rng;

/// The true ATE of the data-generating process.
pub const TRUE_DELTA: f64 = 1.5;

pub const COVARIATE_DIM: usize = 5;

/// Which working models are correct in each scenario, in nuisance order
/// `(pi, mu, delta, tau, rho)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScenarioId {
    S0,
    S1,
    S2,
    S3,
}

impl ScenarioId {
    /// Correctness flags in nuisance order `(pi, mu, delta, tau, rho)`.
    pub fn correctness(self) -> [bool; 5] {
        match self {
            ScenarioId::S0 => [true, true, true, true, true],
            ScenarioId::S1 => [true, true, false, false, false],
            ScenarioId::S2 => [true, false, true, true, false],
            ScenarioId::S3 => [false, true, true, false, true],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioId::S0 => "S0",
            ScenarioId::S1 => "S1",
            ScenarioId::S2 => "S2",
            ScenarioId::S3 => "S3",
        }
    }
}

impl std::str::FromStr for ScenarioId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "S0" => Ok(ScenarioId::S0),
            "S1" => Ok(ScenarioId::S1),
            "S2" => Ok(ScenarioId::S2),
            "S3" => Ok(ScenarioId::S3),
            other => Err(format!("unknown scenario {other}")),
        }
    }
}

/// A generated dataset together with the hidden confounder draws (kept for
/// diagnostics only; estimators never see them).
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: Dataset,
    pub u: Vec<f64>,
    /// Times the treatment probability had to be clamped into [0, 1].
    pub prob_clamped: usize,
}

fn bump5(x: &[f64]) -> [f64; 5] {
    [
        logistic_bump(x[0]),
        logistic_bump(x[1]),
        logistic_bump(x[2]),
        logistic_bump(x[3]),
        logistic_bump(x[4]),
    ]
}

/// `P(Z = 1 | X = x)` of the generator.
pub fn true_pi1(x: &[f64]) -> f64 {
    let s = bump5(x);
    expit(0.8 + s[0] - 0.2 * s[1] - 0.2 * s[2] - 0.2 * s[3] + 0.1 * s[4])
}

/// `P(A = 1 | Z = z, X = x)` of the generator (the `.1 U` term integrates
/// to zero given covariates because the truncation interval is symmetric).
pub fn true_mu(z: u8, x: &[f64]) -> f64 {
    let s = bump5(x);
    expit(-2.0 + 1.5 * f64::from(z) + 0.6 * s[0] - 0.2 * s[1] - 0.2 * s[2] - 0.1 * s[3]
        + 0.1 * s[4])
}

/// Conditional average treatment effect of the generator.
pub fn true_delta(x: &[f64]) -> f64 {
    let s = bump5(x);
    2.0 * s[0] + 0.5 * s[1] + 0.5 * s[2]
}

/// `E(Y - delta(X) A | Z = z, X = x)` of the generator.
pub fn true_tau(z: u8, x: &[f64]) -> f64 {
    let s = bump5(x);
    -2.0 - 2.0 * f64::from(z) + 2.0 * s[0] + 0.5 * s[1] + 0.2 * s[2] + 0.1 * s[3] + 0.1 * s[4]
}

/// Parent variance of the latent confounder given covariates.
pub fn u_parent_variance(x: &[f64]) -> f64 {
    let s = bump5(x);
    0.25 + 0.5 * s[0] + 0.15 * s[1] - 0.1 * s[2] - 0.1 * s[3] + 0.1 * s[4]
}

/// Variance of a centered normal with parent variance `v` truncated to
/// `[-0.5, 0.5]`.
fn truncated_variance(v: f64) -> f64 {
    let sd = v.sqrt();
    let b = 0.5 / sd;
    v * (1.0 - 2.0 * b * norm_pdf(b) / (2.0 * norm_cdf(b) - 1.0))
}

/// `rho(x) = E{(A - mu)(Y - delta A) | X = x} = 0.1 Var(U | X = x)`.
pub fn true_rho(x: &[f64]) -> f64 {
    0.1 * truncated_variance(u_parent_variance(x))
}

/// The generator's nuisance functions as an evaluator bundle.
pub fn oracle_bundle() -> NuisanceBundle {
    let pi1: XFn = std::sync::Arc::new(|x: &[f64]| true_pi1(x));
    let mu: ZxFn = std::sync::Arc::new(|z: u8, x: &[f64]| true_mu(z, x));
    let delta: XFn = std::sync::Arc::new(|x: &[f64]| true_delta(x));
    let tau: ZxFn = std::sync::Arc::new(|z: u8, x: &[f64]| true_tau(z, x));
    let rho: XFn = std::sync::Arc::new(|x: &[f64]| true_rho(x));
    NuisanceBundle::new(pi1, mu, delta, tau, rho)
}

/// Draw `n` observations from the generator.
pub fn generate_dataset(n: usize, seed: u64) -> SimulatedData {
    let mut rng = crate::numerics::rng_from_seed(seed);
    let mut obs = Vec::with_capacity(n);
    let mut u_all = Vec::with_capacity(n);
    let mut prob_clamped = 0usize;
    for _ in 0..n {
        let x: Vec<f64> = (0..COVARIATE_DIM).map(|_| rng.gen::<f64>()).collect();
        let var_u = u_parent_variance(&x);
        let u = sample_truncated_normal(0.0, var_u.sqrt(), -0.5, 0.5, &mut rng)
            .expect("valid truncation interval");

        let z = u8::from(rng.gen::<f64>() < true_pi1(&x));
        let pa_raw = true_mu(z, &x) + 0.1 * u;
        let pa = if (0.0..=1.0).contains(&pa_raw) {
            pa_raw
        } else {
            prob_clamped += 1;
            pa_raw.clamp(0.0, 1.0)
        };
        let a = u8::from(rng.gen::<f64>() < pa);

        let eps = norm_quantile(rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12));
        // The systematic outcome terms are exactly tau(z, x) + delta(x) a.
        let y = true_tau(z, &x) + true_delta(&x) * f64::from(a) + u + eps;
        obs.push(Observation { y, a, z, x });
        u_all.push(u);
    }
    let dataset = Dataset::from_observations(obs).expect("generator produces valid rows");
    SimulatedData {
        dataset,
        u: u_all,
        prob_clamped,
    }
}

fn bump_spec(indices: &[usize]) -> CovariateSpec {
    let mut cols = vec![ColumnTransform::Intercept];
    cols.extend(indices.iter().map(|&j| ColumnTransform::LogisticBump(j)));
    CovariateSpec::new(cols, COVARIATE_DIM).unwrap()
}

fn square_spec(indices: &[usize]) -> CovariateSpec {
    let mut cols = vec![ColumnTransform::Intercept];
    cols.extend(indices.iter().map(|&j| ColumnTransform::CenteredSquare(j)));
    CovariateSpec::new(cols, COVARIATE_DIM).unwrap()
}

/// Working models for a scenario: correct nuisances use the logistic-bump
/// features, misspecified ones the centered-square features, each with an
/// intercept. The effect model uses the first three covariates (the ones
/// carrying the true effect).
pub fn scenario_models(scenario: ScenarioId) -> WorkingModels {
    let all: Vec<usize> = (0..COVARIATE_DIM).collect();
    let effect: Vec<usize> = vec![0, 1, 2];
    let [pi_ok, mu_ok, delta_ok, tau_ok, rho_ok] = scenario.correctness();
    let pick = |ok: bool, idx: &[usize]| if ok { bump_spec(idx) } else { square_spec(idx) };
    WorkingModels {
        pi_spec: pick(pi_ok, &all),
        mu_spec: pick(mu_ok, &all),
        delta_spec: pick(delta_ok, &effect),
        tau_spec: pick(tau_ok, &all),
        rho_spec: pick(rho_ok, &all),
    }
}

// ---------------------------------------------------------------------------
// Monte Carlo harness

/// Estimators the harness can run on each replication.
#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorChoice {
    Delta1,
    Genius,
    GeniusEff,
    Mr,
    Ols,
    Tsiv,
    Dml { kinds: NuisanceLearnerSet, k: usize },
    Sml { criterion: RiskCriterion, splits: usize, kinds: Vec<LearnerKind> },
}

impl EstimatorChoice {
    pub fn label(&self) -> String {
        match self {
            EstimatorChoice::Delta1 => "delta1".into(),
            EstimatorChoice::Genius => "genius".into(),
            EstimatorChoice::GeniusEff => "genius_eff".into(),
            EstimatorChoice::Mr => "mr".into(),
            EstimatorChoice::Ols => "ols".into(),
            EstimatorChoice::Tsiv => "tsiv".into(),
            EstimatorChoice::Dml { kinds, .. } => format!(
                "dml_{}_{}_{}_{}_{}",
                kinds.pi.as_str(),
                kinds.mu.as_str(),
                kinds.delta.as_str(),
                kinds.tau.as_str(),
                kinds.rho.as_str()
            ),
            EstimatorChoice::Sml { criterion, .. } => match criterion {
                RiskCriterion::Dagger => "sml_dagger".into(),
                RiskCriterion::Ddagger => "sml_ddagger".into(),
            },
        }
    }

    /// Shorthand for a DML estimator using one learner kind for all roles.
    pub fn dml_uniform(kind: LearnerKind) -> Self {
        EstimatorChoice::Dml {
            kinds: NuisanceLearnerSet::uniform(kind),
            k: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloConfig {
    pub scenario: ScenarioId,
    pub n: usize,
    pub replications: usize,
    pub estimators: Vec<EstimatorChoice>,
    pub seed: u64,
    pub truth: f64,
    pub mr_config: MrConfig,
    pub learner_params: LearnerParams,
}

impl MonteCarloConfig {
    pub fn new(scenario: ScenarioId, n: usize, replications: usize, seed: u64) -> Self {
        MonteCarloConfig {
            scenario,
            n,
            replications,
            estimators: vec![
                EstimatorChoice::Delta1,
                EstimatorChoice::Genius,
                EstimatorChoice::GeniusEff,
                EstimatorChoice::Mr,
            ],
            seed,
            truth: TRUE_DELTA,
            mr_config: MrConfig::default(),
            learner_params: LearnerParams::default(),
        }
    }
}

/// Aggregates for one estimator across replications.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EstimatorSummary {
    pub label: String,
    pub mean_estimate: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub median_estimate: f64,
    pub median_bias: f64,
    pub coverage95: f64,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MonteCarloSummary {
    pub scenario: String,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub truth: f64,
    pub per_estimator: Vec<EstimatorSummary>,
    /// Treatment-probability clamp events across all replications.
    pub prob_clamped: usize,
    pub prob_clamp_rate: f64,
}

#[derive(Debug, Clone)]
struct RepOutcome {
    results: Vec<std::result::Result<(f64, bool), String>>,
    prob_clamped: usize,
}

fn run_replication(config: &MonteCarloConfig, rep: usize) -> RepOutcome {
    let rep_seed = child_seed(config.seed, rep as u64);
    let sim = generate_dataset(config.n, rep_seed);
    let models = scenario_models(config.scenario);
    let mut mr_config = config.mr_config;
    mr_config.retry_seed = child_seed(rep_seed, 0xA11C);

    let results = config
        .estimators
        .iter()
        .enumerate()
        .map(|(e_idx, choice)| {
            let est_seed = child_seed(rep_seed, 100 + e_idx as u64);
            let report: Result<EstimateReport> = match choice {
                EstimatorChoice::Delta1 => estimate_delta1(&sim.dataset, &models, &mr_config),
                EstimatorChoice::Genius => estimate_genius(&sim.dataset, &models, &mr_config),
                EstimatorChoice::GeniusEff => {
                    estimate_genius_eff(&sim.dataset, &models, &mr_config)
                }
                EstimatorChoice::Mr => estimate_mr(&sim.dataset, &models, &mr_config),
                EstimatorChoice::Ols => {
                    estimate_benchmarks(&sim.dataset, &models, &mr_config).map(|(ols, _)| ols)
                }
                EstimatorChoice::Tsiv => {
                    estimate_benchmarks(&sim.dataset, &models, &mr_config).map(|(_, tsiv)| tsiv)
                }
                EstimatorChoice::Dml { kinds, k } => {
                    let plan = CrossFitPlan {
                        k: *k,
                        seed: est_seed,
                    };
                    let trim = TrimPolicy::default();
                    estimate_dml(&sim.dataset, kinds, &plan, &trim, &config.learner_params)
                }
                EstimatorChoice::Sml {
                    criterion,
                    splits,
                    kinds,
                } => {
                    let candidates = CandidateLists::uniform_kinds(kinds);
                    let sml_config = SmlConfig {
                        splits: *splits,
                        seed: est_seed,
                        ..SmlConfig::default()
                    };
                    let trim = TrimPolicy::default();
                    select_and_estimate(
                        &sim.dataset,
                        &candidates,
                        &sml_config,
                        *criterion,
                        &trim,
                        &config.learner_params,
                    )
                    .map(|r| r.report)
                }
            };
            report
                .map(|r| (r.estimate, r.covers(config.truth)))
                .map_err(|e| e.to_string())
        })
        .collect();

    RepOutcome {
        results,
        prob_clamped: sim.prob_clamped,
    }
}

/// Run the harness: generate, estimate, aggregate. Replications run in
/// parallel on independent seed streams; per-replication failures are
/// counted, never imputed.
pub fn run_monte_carlo(config: &MonteCarloConfig) -> MonteCarloSummary {
    let outcomes = par::map_indices(config.replications, |rep| run_replication(config, rep));

    let mut per_estimator = Vec::with_capacity(config.estimators.len());
    for (e_idx, choice) in config.estimators.iter().enumerate() {
        let mut estimates = Vec::new();
        let mut covers = 0usize;
        let mut failures = 0usize;
        for outcome in &outcomes {
            match &outcome.results[e_idx] {
                Ok((est, cov)) => {
                    estimates.push(*est);
                    if *cov {
                        covers += 1;
                    }
                }
                Err(_) => failures += 1,
            }
        }
        let (mean, sd) = mean_and_sd(&estimates);
        let rmse = if estimates.is_empty() {
            f64::NAN
        } else {
            kahan_mean(
                &estimates
                    .iter()
                    .map(|e| (e - config.truth) * (e - config.truth))
                    .collect::<Vec<_>>(),
            )
            .sqrt()
        };
        let med = median(&estimates);
        per_estimator.push(EstimatorSummary {
            label: choice.label(),
            mean_estimate: mean,
            bias: mean - config.truth,
            sd,
            rmse,
            median_estimate: med,
            median_bias: med - config.truth,
            coverage95: if estimates.is_empty() {
                f64::NAN
            } else {
                covers as f64 / estimates.len() as f64
            },
            successes: estimates.len(),
            failures,
        });
    }

    let prob_clamped: usize = outcomes.iter().map(|o| o.prob_clamped).sum();
    let total_draws = config.replications * config.n;
    MonteCarloSummary {
        scenario: config.scenario.as_str().to_string(),
        n: config.n,
        replications: config.replications,
        seed: config.seed,
        truth: config.truth,
        per_estimator,
        prob_clamped,
        prob_clamp_rate: if total_draws == 0 {
            0.0
        } else {
            prob_clamped as f64 / total_draws as f64
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instrument_probability_at_center() {
        // All bumps equal 0.5 when every covariate sits at 0.5.
        let x = [0.5; 5];
        let p = true_pi1(&x);
        assert!((p - expit(1.05)).abs() < 1e-12);
        assert!((p - 0.7408).abs() < 1e-3);
    }

    #[test]
    fn delta_mean_is_three_halves() {
        let sim = generate_dataset(200_000, 42);
        let vals: Vec<f64> = (0..sim.dataset.n())
            .map(|i| true_delta(sim.dataset.x_row(i)))
            .collect();
        let m = kahan_mean(&vals);
        assert!((m - TRUE_DELTA).abs() < 0.01, "mean {m}");
    }

    #[test]
    fn generator_is_seed_reproducible() {
        let a = generate_dataset(50, 9);
        let b = generate_dataset(50, 9);
        assert_eq!(a.dataset.y(), b.dataset.y());
        assert_eq!(a.dataset.a(), b.dataset.a());
        assert_eq!(a.u, b.u);
        let c = generate_dataset(50, 10);
        assert_ne!(a.dataset.y(), c.dataset.y());
    }

    #[test]
    fn treatment_probability_clamp_is_rare() {
        let sim = generate_dataset(100_000, 3);
        assert!(
            (sim.prob_clamped as f64) < 0.001 * 100_000.0,
            "clamped {} times",
            sim.prob_clamped
        );
    }

    #[test]
    fn scenario_specs_follow_correctness_map() {
        let m = scenario_models(ScenarioId::S1);
        // pi correct: logistic-bump features.
        assert!(m
            .pi_spec
            .columns()
            .iter()
            .any(|c| matches!(c, ColumnTransform::LogisticBump(_))));
        // delta misspecified: centered-square features.
        assert!(m
            .delta_spec
            .columns()
            .iter()
            .any(|c| matches!(c, ColumnTransform::CenteredSquare(_))));

        let m3 = scenario_models(ScenarioId::S3);
        assert!(m3
            .pi_spec
            .columns()
            .iter()
            .any(|c| matches!(c, ColumnTransform::CenteredSquare(_))));
        assert!(m3
            .mu_spec
            .columns()
            .iter()
            .any(|c| matches!(c, ColumnTransform::LogisticBump(_))));

        let m0 = scenario_models(ScenarioId::S0);
        for spec in [
            &m0.pi_spec,
            &m0.mu_spec,
            &m0.delta_spec,
            &m0.tau_spec,
            &m0.rho_spec,
        ] {
            assert!(spec
                .columns()
                .iter()
                .all(|c| !matches!(c, ColumnTransform::CenteredSquare(_))));
        }
        assert_eq!(m0.delta_spec.width(), 4);
    }

    #[test]
    fn hidden_confounder_covariance_matches_rho() {
        // E{(A - mu0)(Y - delta0 A)} should match E{rho0(X)}; the same must
        // hold within each instrument arm because the covariance is
        // conditionally free of Z.
        let sim = generate_dataset(400_000, 17);
        let ds = &sim.dataset;
        let mut prod = Vec::with_capacity(ds.n());
        let mut rho = Vec::with_capacity(ds.n());
        let mut prod_by_arm = [Vec::new(), Vec::new()];
        let mut rho_by_arm = [Vec::new(), Vec::new()];
        for i in 0..ds.n() {
            let o = ds.obs(i);
            let v = (f64::from(o.a) - true_mu(o.z, o.x)) * (o.y - true_delta(o.x) * f64::from(o.a));
            let r = true_rho(o.x);
            prod.push(v);
            rho.push(r);
            prod_by_arm[o.z as usize].push(v);
            rho_by_arm[o.z as usize].push(r);
        }
        let (pm, psd) = mean_and_sd(&prod);
        let rm = kahan_mean(&rho);
        let se = psd / (prod.len() as f64).sqrt();
        assert!((pm - rm).abs() < 4.0 * se, "overall {pm} vs {rm} (se {se})");
        for arm in 0..2 {
            let (pa, psa) = mean_and_sd(&prod_by_arm[arm]);
            let ra = kahan_mean(&rho_by_arm[arm]);
            let sea = psa / (prod_by_arm[arm].len() as f64).sqrt();
            assert!((pa - ra).abs() < 4.0 * sea, "arm {arm}: {pa} vs {ra}");
        }
    }

    #[test]
    fn single_replication_summary_is_degenerate() {
        let mut config = MonteCarloConfig::new(ScenarioId::S0, 400, 1, 5);
        config.estimators = vec![EstimatorChoice::Mr];
        let summary = run_monte_carlo(&config);
        let s = &summary.per_estimator[0];
        assert_eq!(s.successes + s.failures, 1);
        if s.successes == 1 {
            assert!(s.coverage95 == 0.0 || s.coverage95 == 1.0);
            assert_eq!(s.sd, 0.0);
            assert_eq!(s.mean_estimate, s.median_estimate);
        }
    }

    #[test]
    fn monte_carlo_is_seed_reproducible() {
        let mut config = MonteCarloConfig::new(ScenarioId::S0, 300, 4, 11);
        config.estimators = vec![EstimatorChoice::Delta1, EstimatorChoice::Mr];
        let a = run_monte_carlo(&config);
        let b = run_monte_carlo(&config);
        for (x, y) in a.per_estimator.iter().zip(&b.per_estimator) {
            assert_eq!(x.mean_estimate.to_bits(), y.mean_estimate.to_bits());
            assert_eq!(x.sd.to_bits(), y.sd.to_bits());
            assert_eq!(x.coverage95, y.coverage95);
        }
    }
}
