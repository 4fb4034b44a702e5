//! Estimator-level checks on hand-built laws with known constants, plus
//! solver-independence and invariance properties.

use ivmr::data::{ColumnTransform, CovariateSpec, Dataset, Observation};
use ivmr::mr::{
    estimate_benchmarks, estimate_delta1, estimate_genius, estimate_genius_eff, estimate_mr,
    fit_stage1, fit_stage2, MrConfig, WorkingModels,
};
use ivmr::numerics::{child_rng, expit, mean_and_sd, norm_quantile};
use ivmr::sim::{generate_dataset, scenario_models, ScenarioId};
use rand::Rng;

const EFFECT: f64 = 0.8;

/// A simple unconfounded law: constant effect, linear tau, zero rho; every
/// working model in `hand_models` is exactly correct.
fn hand_law(n: usize, seed: u64, direct_effect: f64) -> Dataset {
    let mut rng = child_rng(seed, 0);
    let obs: Vec<Observation> = (0..n)
        .map(|_| {
            let x: f64 = rng.gen();
            let z = u8::from(rng.gen::<f64>() < expit(0.3 + 0.4 * x));
            let a = u8::from(rng.gen::<f64>() < expit(-0.4 + 1.1 * f64::from(z) + 0.8 * x));
            let eps = 0.5 * norm_quantile(rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12));
            let y = EFFECT * f64::from(a) + 2.0 - x + direct_effect * f64::from(z) + eps;
            Observation { y, a, z, x: vec![x] }
        })
        .collect();
    Dataset::from_observations(obs).unwrap()
}

fn hand_models() -> WorkingModels {
    let raw = CovariateSpec::new(
        vec![ColumnTransform::Intercept, ColumnTransform::Raw(0)],
        1,
    )
    .unwrap();
    WorkingModels {
        pi_spec: raw.clone(),
        mu_spec: raw.clone(),
        delta_spec: CovariateSpec::intercept_only(),
        tau_spec: raw,
        rho_spec: CovariateSpec::intercept_only(),
    }
}

#[test]
fn stage2_recovers_constant_effect_across_replications() {
    let models = hand_models();
    let config = MrConfig::default();
    let reps = 60;
    let mut alphas = Vec::with_capacity(reps);
    let mut beta1 = Vec::with_capacity(reps);
    for r in 0..reps {
        let ds = hand_law(600, 1000 + r as u64, 0.5);
        let stage1 = fit_stage1(&ds, &models, &config).unwrap();
        let stage2 = fit_stage2(&ds, &models, &stage1, &config).unwrap();
        assert!(stage2.fit.converged);
        alphas.push(stage2.alpha[0]);
        beta1.push(stage2.beta[0]);
    }
    let (mean_alpha, sd_alpha) = mean_and_sd(&alphas);
    let se = sd_alpha / (reps as f64).sqrt();
    assert!(
        (mean_alpha - EFFECT).abs() < 3.0 * se,
        "alpha mean {mean_alpha} (se {se})"
    );
    let (mean_b1, sd_b1) = mean_and_sd(&beta1);
    let se_b1 = sd_b1 / (reps as f64).sqrt();
    assert!(
        (mean_b1 - 0.5).abs() < 3.0 * se_b1,
        "direct effect mean {mean_b1} (se {se_b1})"
    );
}

#[test]
fn direct_effect_vanishes_when_instrument_excluded() {
    let models = hand_models();
    let config = MrConfig::default();
    let reps = 60;
    let mut beta1 = Vec::with_capacity(reps);
    for r in 0..reps {
        let ds = hand_law(600, 2000 + r as u64, 0.0);
        let report = estimate_genius_eff(&ds, &models, &config).unwrap();
        beta1.push(report.aux.unwrap().coefficient);
    }
    let (mean_b1, sd_b1) = mean_and_sd(&beta1);
    let se = sd_b1 / (reps as f64).sqrt();
    assert!(mean_b1.abs() < 3.0 * se, "beta1 mean {mean_b1} (se {se})");
}

#[test]
fn underdetermined_stage2_is_rejected() {
    // 4 observations vs 5 stage-2 parameters (alpha 1, beta 3, xi 1).
    let obs = vec![
        Observation { y: 1.0, a: 1, z: 1, x: vec![0.2] },
        Observation { y: 0.5, a: 0, z: 0, x: vec![0.7] },
        Observation { y: -0.3, a: 1, z: 0, x: vec![0.4] },
        Observation { y: 2.0, a: 0, z: 1, x: vec![0.9] },
    ];
    let ds = Dataset::from_observations(obs).unwrap();
    let models = hand_models();
    let config = MrConfig::default();
    let err = fit_stage1(&ds, &models, &config)
        .and_then(|s1| fit_stage2(&ds, &models, &s1, &config));
    assert!(err.is_err(), "expected failure on a tiny sample");
}

#[test]
fn genius_matches_scalar_bisection_oracle() {
    // Intercept-only effect model: the moment in alpha is scalar and
    // monotone, so bisection on the same empirical moment is an
    // independent solver.
    let ds = hand_law(1500, 4, 0.5);
    let models = hand_models();
    let config = MrConfig::default();
    let report = estimate_genius(&ds, &models, &config).unwrap();

    let stage1 = fit_stage1(&ds, &models, &config).unwrap();
    let gamma = &stage1.gamma.coefficients;
    let theta = &stage1.theta.coefficients;
    let moment = |alpha: f64| -> f64 {
        let mut total = 0.0;
        for i in 0..ds.n() {
            let o = ds.obs(i);
            let x = o.x[0];
            let pi1 = expit(gamma[0] + gamma[1] * x);
            let pi_obs = if o.z == 1 { pi1 } else { 1.0 - pi1 };
            let mu = expit(theta[0] * f64::from(o.z) + theta[1] + theta[2] * x);
            let sign = if o.z == 1 { 1.0 } else { -1.0 };
            total +=
                sign / pi_obs * (f64::from(o.a) - mu) * (o.y - alpha * f64::from(o.a));
        }
        total / ds.n() as f64
    };
    let (mut lo, mut hi) = (-10.0, 10.0);
    assert!(moment(lo) * moment(hi) < 0.0, "bisection bracket invalid");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if moment(lo) * moment(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let oracle = 0.5 * (lo + hi);
    assert!(
        (report.estimate - oracle).abs() < 1e-7,
        "{} vs {oracle}",
        report.estimate
    );
}

#[test]
fn estimates_are_invariant_to_row_permutation() {
    let sim = generate_dataset(1200, 5);
    let models = scenario_models(ScenarioId::S0);
    let config = MrConfig::default();
    let base = estimate_mr(&sim.dataset, &models, &config).unwrap();

    let n = sim.dataset.n();
    let perm: Vec<usize> = (0..n).rev().collect();
    let obs: Vec<Observation> = perm
        .iter()
        .map(|&i| {
            let o = sim.dataset.obs(i);
            Observation {
                y: o.y,
                a: o.a,
                z: o.z,
                x: o.x.to_vec(),
            }
        })
        .collect();
    let shuffled = Dataset::from_observations(obs).unwrap();
    let permuted = estimate_mr(&shuffled, &models, &config).unwrap();
    let rel = (base.estimate - permuted.estimate).abs() / base.estimate.abs().max(1.0);
    assert!(rel < 1e-12, "permutation moved the estimate by {rel}");
}

#[test]
fn estimates_scale_linearly_in_the_outcome() {
    let sim = generate_dataset(1000, 6);
    let models = scenario_models(ScenarioId::S0);
    let config = MrConfig::default();
    let base = estimate_mr(&sim.dataset, &models, &config).unwrap();

    let c = 2.0;
    let obs: Vec<Observation> = (0..sim.dataset.n())
        .map(|i| {
            let o = sim.dataset.obs(i);
            Observation {
                y: c * o.y,
                a: o.a,
                z: o.z,
                x: o.x.to_vec(),
            }
        })
        .collect();
    let scaled_ds = Dataset::from_observations(obs).unwrap();
    type Estimator =
        fn(&Dataset, &WorkingModels, &MrConfig) -> ivmr::error::Result<ivmr::EstimateReport>;
    let estimators: [(Estimator, &str); 4] = [
        (estimate_mr, "mr"),
        (estimate_delta1, "delta1"),
        (estimate_genius, "genius"),
        (estimate_genius_eff, "genius_eff"),
    ];
    for (estimator, name) in estimators {
        let unscaled = estimator(&sim.dataset, &models, &config).unwrap();
        let scaled = estimator(&scaled_ds, &models, &config).unwrap();
        let rel_est = (scaled.estimate - c * unscaled.estimate).abs()
            / (c * unscaled.estimate).abs().max(1e-6);
        let rel_se =
            (scaled.std_error - c * unscaled.std_error).abs() / (c * unscaled.std_error);
        assert!(rel_est < 1e-6, "{name} estimate scaling off by {rel_est}");
        assert!(rel_se < 1e-5, "{name} SE scaling off by {rel_se}");
    }
    let _ = base;
}

#[test]
fn genius_eff_agrees_with_mr_on_zero_rho_law() {
    let models = hand_models();
    let config = MrConfig::default();
    let reps = 40;
    let mut diff = Vec::with_capacity(reps);
    for r in 0..reps {
        let ds = hand_law(800, 3000 + r as u64, 0.5);
        let a = estimate_genius_eff(&ds, &models, &config).unwrap();
        let b = estimate_mr(&ds, &models, &config).unwrap();
        diff.push(a.estimate - b.estimate);
    }
    let (mean_diff, sd_diff) = mean_and_sd(&diff);
    let se = sd_diff / (reps as f64).sqrt();
    assert!(
        mean_diff.abs() < 3.0 * se.max(1e-4),
        "mean difference {mean_diff} (se {se})"
    );
}

#[test]
fn benchmarks_agree_with_mr_without_confounding() {
    let models = hand_models();
    let config = MrConfig::default();
    let reps = 40;
    let mut ols_means = Vec::new();
    let mut tsiv_means = Vec::new();
    let mut mr_means = Vec::new();
    for r in 0..reps {
        let ds = hand_law(800, 4000 + r as u64, 0.0);
        let (ols, tsiv) = estimate_benchmarks(&ds, &models, &config).unwrap();
        let mr = estimate_mr(&ds, &models, &config).unwrap();
        ols_means.push(ols.estimate);
        tsiv_means.push(tsiv.estimate);
        mr_means.push(mr.estimate);
    }
    for (label, values) in [("ols", &ols_means), ("tsiv", &tsiv_means), ("mr", &mr_means)] {
        let (mean, sd) = mean_and_sd(values);
        let se = sd / (reps as f64).sqrt();
        assert!(
            (mean - EFFECT).abs() < 3.5 * se,
            "{label} mean {mean} (se {se})"
        );
    }
}

#[test]
fn ols_reduces_to_difference_in_means_on_intercept_design() {
    // delta and tau both intercept-only makes the OLS fit y ~ a + 1; its
    // effect coefficient is exactly the arm difference in means.
    let ds = hand_law(500, 7, 0.0);
    let models = WorkingModels {
        pi_spec: CovariateSpec::intercept_only(),
        mu_spec: CovariateSpec::intercept_only(),
        delta_spec: CovariateSpec::intercept_only(),
        tau_spec: CovariateSpec::intercept_only(),
        rho_spec: CovariateSpec::intercept_only(),
    };
    let (ols, _) = estimate_benchmarks(&ds, &models, &MrConfig::default()).unwrap();
    let mut sums = [0.0, 0.0];
    let mut counts = [0usize, 0usize];
    for i in 0..ds.n() {
        let o = ds.obs(i);
        sums[o.a as usize] += o.y;
        counts[o.a as usize] += 1;
    }
    let diff = sums[1] / counts[1] as f64 - sums[0] / counts[0] as f64;
    assert!((ols.estimate - diff).abs() < 1e-10, "{} vs {diff}", ols.estimate);
}

#[test]
fn stage1_recovers_generator_coefficients() {
    // P(Z=1|X) = expit(0.8 + Xs1 - .2 Xs2 - .2 Xs3 - .2 Xs4 + .1 Xs5) on
    // the bump features, so gamma should average to those constants.
    let truth = [0.8, 1.0, -0.2, -0.2, -0.2, 0.1];
    let models = scenario_models(ScenarioId::S0);
    let config = MrConfig::default();
    let reps = 200;
    let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); truth.len()];
    for r in 0..reps {
        let sim = generate_dataset(4000, 9000 + r as u64);
        let stage1 = fit_stage1(&sim.dataset, &models, &config).unwrap();
        assert!(stage1.gamma.converged);
        for (j, d) in draws.iter_mut().enumerate() {
            d.push(stage1.gamma.coefficients[j]);
        }
    }
    for (j, d) in draws.iter().enumerate() {
        let (mean, sd) = mean_and_sd(d);
        let se = sd / (reps as f64).sqrt();
        assert!(
            (mean - truth[j]).abs() < 3.5 * se,
            "gamma[{j}] mean {mean} vs {} (se {se})",
            truth[j]
        );
    }
}

#[test]
fn stage2_moment_residual_meets_tolerance_on_s0() {
    let sim = generate_dataset(2000, 12);
    let models = scenario_models(ScenarioId::S0);
    let config = MrConfig::default();
    let stage1 = fit_stage1(&sim.dataset, &models, &config).unwrap();
    let stage2 = fit_stage2(&sim.dataset, &models, &stage1, &config).unwrap();
    assert!(stage2.fit.converged);
    assert!(
        stage2.fit.final_gradient_norm <= 1e-8,
        "residual {}",
        stage2.fit.final_gradient_norm
    );
    // Just-identification: moment count equals parameter count.
    assert_eq!(
        stage2.alpha.len() + stage2.beta.len() + stage2.xi.len(),
        models.delta_spec.width() + 1 + models.tau_spec.width() + models.rho_spec.width()
    );
}
