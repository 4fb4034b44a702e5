//! L1-penalized regression by cyclic coordinate descent on standardized
//! features, with a log-spaced lambda path and k-fold cross-validated
//! lambda selection. The binary family runs penalized IRLS with weighted
//! coordinate descent on the working response.

use super::{Family, LassoParams};
use crate::numerics::{child_rng, expit, kahan_mean};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct LassoModel {
    family: Family,
    /// Raw-scale intercept and coefficients.
    intercept: f64,
    coefs: Vec<f64>,
    pub selected_lambda: f64,
    pub in_sample_loss: f64,
}

const COEF_TOL: f64 = 1e-11;
const MAX_PASSES: usize = 100_000;
const IRLS_STEPS: usize = 30;
const WEIGHT_FLOOR: f64 = 1e-5;
const PROB_CLAMP: f64 = 1e-8;

struct Standardized {
    cols: Vec<Vec<f64>>, // active standardized columns
    active: Vec<usize>,  // original column index per active column
    means: Vec<f64>,
    sds: Vec<f64>,
    n: usize,
    q_raw: usize,
}

fn standardize(features: &[Vec<f64>]) -> Standardized {
    let n = features.len();
    let q = features[0].len();
    let mut cols = Vec::new();
    let mut active = Vec::new();
    let mut means = Vec::new();
    let mut sds = Vec::new();
    for j in 0..q {
        let col: Vec<f64> = features.iter().map(|r| r[j]).collect();
        let m = kahan_mean(&col);
        let var = kahan_mean(&col.iter().map(|v| (v - m) * (v - m)).collect::<Vec<_>>());
        let sd = var.sqrt();
        if sd > 1e-12 {
            cols.push(col.iter().map(|v| (v - m) / sd).collect());
            active.push(j);
            means.push(m);
            sds.push(sd);
        }
    }
    Standardized {
        cols,
        active,
        means,
        sds,
        n,
        q_raw: q,
    }
}

/// One weighted lasso solve at fixed lambda, warm-started from `beta`.
/// Minimizes `(1/2n) sum w (z - b0 - Xs beta)^2 + lambda |beta|_1`.
fn cd_solve(
    xs: &Standardized,
    z: &[f64],
    w: &[f64],
    lambda: f64,
    b0: &mut f64,
    beta: &mut [f64],
) {
    let n = xs.n as f64;
    let q = xs.cols.len();
    let w_sum: f64 = w.iter().sum();
    // Per-coordinate curvature (1/n) sum w x^2.
    let denom: Vec<f64> = xs
        .cols
        .iter()
        .map(|c| c.iter().zip(w).map(|(x, wi)| wi * x * x).sum::<f64>() / n)
        .collect();

    // Maintain residual r = z - b0 - Xs beta.
    let mut r: Vec<f64> = (0..xs.n)
        .map(|i| {
            let mut eta = *b0;
            for j in 0..q {
                eta += beta[j] * xs.cols[j][i];
            }
            z[i] - eta
        })
        .collect();

    for _pass in 0..MAX_PASSES {
        let mut max_change: f64 = 0.0;

        // Unpenalized intercept.
        let d0: f64 = r.iter().zip(w).map(|(ri, wi)| wi * ri).sum::<f64>() / w_sum;
        if d0.abs() > 0.0 {
            *b0 += d0;
            for ri in r.iter_mut() {
                *ri -= d0;
            }
            max_change = max_change.max(d0.abs());
        }

        for j in 0..q {
            if denom[j] <= 0.0 {
                continue;
            }
            let col = &xs.cols[j];
            let mut rho = 0.0;
            for i in 0..xs.n {
                rho += w[i] * col[i] * r[i];
            }
            rho = rho / n + denom[j] * beta[j];
            let new = soft_threshold(rho, lambda) / denom[j];
            let change = new - beta[j];
            if change != 0.0 {
                for i in 0..xs.n {
                    r[i] -= change * col[i];
                }
                beta[j] = new;
                max_change = max_change.max(change.abs());
            }
        }
        if max_change < COEF_TOL {
            break;
        }
    }
}

#[inline]
fn soft_threshold(v: f64, lambda: f64) -> f64 {
    if v > lambda {
        v - lambda
    } else if v < -lambda {
        v + lambda
    } else {
        0.0
    }
}

/// Fit at fixed lambda, warm started; returns `(b0, beta)` in the
/// standardized space.
fn fit_at_standardized(
    xs: &Standardized,
    y: &[f64],
    family: Family,
    lambda: f64,
    b0: &mut f64,
    beta: &mut [f64],
) {
    match family {
        Family::Continuous => {
            let w = vec![1.0; xs.n];
            cd_solve(xs, y, &w, lambda, b0, beta);
        }
        Family::Binary => {
            let q = xs.cols.len();
            for _ in 0..IRLS_STEPS {
                let old_b0 = *b0;
                let old: Vec<f64> = beta.to_vec();
                let mut z = vec![0.0; xs.n];
                let mut w = vec![0.0; xs.n];
                for i in 0..xs.n {
                    let mut eta = *b0;
                    for j in 0..q {
                        eta += beta[j] * xs.cols[j][i];
                    }
                    let p = expit(eta);
                    let wi = (p * (1.0 - p)).max(WEIGHT_FLOOR);
                    w[i] = wi;
                    z[i] = eta + (y[i] - p) / wi;
                }
                cd_solve(xs, &z, &w, lambda, b0, beta);
                let change = beta
                    .iter()
                    .zip(&old)
                    .map(|(a, b)| (a - b).abs())
                    .fold((*b0 - old_b0).abs(), f64::max);
                if change < 1e-9 {
                    break;
                }
            }
        }
    }
}

fn to_raw(xs: &Standardized, b0: f64, beta: &[f64], family: Family, lambda: f64) -> LassoModel {
    let mut coefs = vec![0.0; xs.q_raw];
    let mut intercept = b0;
    for (k, &j) in xs.active.iter().enumerate() {
        coefs[j] = beta[k] / xs.sds[k];
        intercept -= beta[k] * xs.means[k] / xs.sds[k];
    }
    LassoModel {
        family,
        intercept,
        coefs,
        selected_lambda: lambda,
        in_sample_loss: f64::NAN,
    }
}

impl LassoModel {
    pub fn linear_score(&self, x: &[f64]) -> f64 {
        let mut eta = self.intercept;
        for (c, v) in self.coefs.iter().zip(x) {
            eta += c * v;
        }
        eta
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.family {
            Family::Continuous => self.linear_score(x),
            Family::Binary => expit(self.linear_score(x)),
        }
    }

    pub fn coefficients(&self) -> (&f64, &[f64]) {
        (&self.intercept, &self.coefs)
    }

    fn constant(value: f64, family: Family) -> Self {
        let intercept = match family {
            Family::Continuous => value,
            Family::Binary => {
                let p = value.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                (p / (1.0 - p)).ln()
            }
        };
        LassoModel {
            family,
            intercept,
            coefs: Vec::new(),
            selected_lambda: f64::INFINITY,
            in_sample_loss: 0.0,
        }
    }

    /// Direct fit at a fixed lambda (no cross-validation).
    pub fn fit_at(features: &[Vec<f64>], y: &[f64], family: Family, lambda: f64) -> Self {
        if degenerate(y) {
            return LassoModel::constant(y[0], family);
        }
        let xs = standardize(features);
        if xs.cols.is_empty() {
            return LassoModel::constant(kahan_mean(y), family);
        }
        let mut b0 = initial_intercept(y, family);
        let mut beta = vec![0.0; xs.cols.len()];
        fit_at_standardized(&xs, y, family, lambda, &mut b0, &mut beta);
        to_raw(&xs, b0, &beta, family, lambda)
    }

    /// Path fit with k-fold cross-validated lambda selection.
    pub fn fit_cv(
        features: &[Vec<f64>],
        y: &[f64],
        family: Family,
        params: &LassoParams,
        seed: u64,
    ) -> Self {
        if degenerate(y) {
            return LassoModel::constant(y[0], family);
        }
        let n = y.len();
        let xs_full = standardize(features);
        if xs_full.cols.is_empty() {
            return LassoModel::constant(kahan_mean(y), family);
        }

        // Common lambda grid from the full data: the null-model gradient.
        let y_bar = kahan_mean(y);
        let lambda_max = xs_full
            .cols
            .iter()
            .map(|c| {
                (c.iter()
                    .zip(y)
                    .map(|(x, yi)| x * (yi - y_bar))
                    .sum::<f64>()
                    / n as f64)
                    .abs()
            })
            .fold(0.0, f64::max)
            .max(1e-10);
        let k_grid = params.grid_size.max(2);
        let ratio = params.lambda_min_ratio;
        let grid: Vec<f64> = (0..k_grid)
            .map(|k| lambda_max * ratio.powf(k as f64 / (k_grid - 1) as f64))
            .collect();

        // Fold assignment by seeded shuffle.
        let folds = params.cv_folds.clamp(2, n);
        let mut rng = child_rng(seed, 0);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut fold_of = vec![0usize; n];
        for (pos, &i) in perm.iter().enumerate() {
            fold_of[i] = pos % folds;
        }

        let mut cv_loss = vec![0.0; grid.len()];
        for fold in 0..folds {
            let train_rows: Vec<usize> = (0..n).filter(|i| fold_of[*i] != fold).collect();
            let test_rows: Vec<usize> = (0..n).filter(|i| fold_of[*i] == fold).collect();
            if train_rows.len() < 2 || test_rows.is_empty() {
                continue;
            }
            let f_train: Vec<Vec<f64>> = train_rows.iter().map(|&i| features[i].clone()).collect();
            let y_train: Vec<f64> = train_rows.iter().map(|&i| y[i]).collect();
            if degenerate(&y_train) {
                let model = LassoModel::constant(y_train[0], family);
                for (g, loss) in cv_loss.iter_mut().enumerate() {
                    let _ = g;
                    *loss += holdout_loss(&model, features, y, &test_rows, family);
                }
                continue;
            }
            let xs = standardize(&f_train);
            if xs.cols.is_empty() {
                continue;
            }
            let mut b0 = initial_intercept(&y_train, family);
            let mut beta = vec![0.0; xs.cols.len()];
            for (g, &lambda) in grid.iter().enumerate() {
                fit_at_standardized(&xs, &y_train, family, lambda, &mut b0, &mut beta);
                let model = to_raw(&xs, b0, &beta, family, lambda);
                cv_loss[g] += holdout_loss(&model, features, y, &test_rows, family);
            }
        }

        // Smallest CV loss; ties go to the larger (earlier) lambda.
        let mut best = 0usize;
        for g in 1..grid.len() {
            if cv_loss[g] < cv_loss[best] {
                best = g;
            }
        }
        let lambda_star = grid[best];

        // Refit on the full data along the path down to the selected lambda.
        let mut b0 = initial_intercept(y, family);
        let mut beta = vec![0.0; xs_full.cols.len()];
        for &lambda in grid.iter().take(best + 1) {
            fit_at_standardized(&xs_full, y, family, lambda, &mut b0, &mut beta);
        }
        let mut model = to_raw(&xs_full, b0, &beta, family, lambda_star);
        model.in_sample_loss =
            holdout_loss(&model, features, y, &(0..n).collect::<Vec<_>>(), family)
                / n as f64;
        model
    }
}

fn degenerate(y: &[f64]) -> bool {
    y.iter().all(|&v| v == y[0])
}

fn initial_intercept(y: &[f64], family: Family) -> f64 {
    let m = kahan_mean(y);
    match family {
        Family::Continuous => m,
        Family::Binary => {
            let p = m.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            (p / (1.0 - p)).ln()
        }
    }
}

/// Total (not averaged) held-out loss: squared error or binomial deviance.
fn holdout_loss(
    model: &LassoModel,
    features: &[Vec<f64>],
    y: &[f64],
    rows: &[usize],
    family: Family,
) -> f64 {
    let mut loss = 0.0;
    for &i in rows {
        match family {
            Family::Continuous => {
                let e = y[i] - model.predict(&features[i]);
                loss += e * e;
            }
            Family::Binary => {
                let p = model.predict(&features[i]).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                loss -= 2.0 * (y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln());
            }
        }
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_from_seed;
    use nalgebra::{DMatrix, DVector};

    fn toy_regression(seed: u64, n: usize, q: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = rng_from_seed(seed);
        let truth: Vec<f64> = (0..q).map(|j| if j % 2 == 0 { 1.5 } else { -0.7 }).collect();
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..q).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let noise: f64 = rng.gen_range(-0.2..0.2);
            let y = 0.3 + x.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>() + noise;
            xs.push(x);
            ys.push(y);
        }
        (xs, ys)
    }

    #[test]
    fn lambda_above_max_shrinks_to_mean() {
        let (xs, ys) = toy_regression(51, 80, 3);
        let model = LassoModel::fit_at(&xs, &ys, Family::Continuous, 1e6);
        let mean = kahan_mean(&ys);
        assert!((model.predict(&xs[0]) - mean).abs() < 1e-8);
        assert!(model.coefs.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn zero_lambda_matches_ols() {
        let (xs, ys) = toy_regression(52, 50, 3);
        let model = LassoModel::fit_at(&xs, &ys, Family::Continuous, 0.0);
        // Independent OLS via normal equations with an intercept column.
        let n = ys.len();
        let mut design = DMatrix::zeros(n, 4);
        for i in 0..n {
            design[(i, 0)] = 1.0;
            for j in 0..3 {
                design[(i, 1 + j)] = xs[i][j];
            }
        }
        let xtx = design.transpose() * &design;
        let xty = design.transpose() * DVector::from_column_slice(&ys);
        let ols = xtx.lu().solve(&xty).unwrap();
        assert!((model.intercept - ols[0]).abs() < 1e-6, "intercept");
        for j in 0..3 {
            assert!(
                (model.coefs[j] - ols[1 + j]).abs() < 1e-6,
                "coef {j}: {} vs {}",
                model.coefs[j],
                ols[1 + j]
            );
        }
    }

    #[test]
    fn constant_binary_target_clamps() {
        let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let ys = vec![1.0; 20];
        let model = LassoModel::fit_cv(&xs, &ys, Family::Binary, &LassoParams::default(), 3);
        let p = model.predict(&[5.0]);
        assert!(p > 0.99 && p <= 1.0);
    }

    #[test]
    fn cv_fit_recovers_signal() {
        let (xs, ys) = toy_regression(53, 300, 4);
        let model = LassoModel::fit_cv(&xs, &ys, Family::Continuous, &LassoParams::default(), 9);
        assert!(model.selected_lambda.is_finite());
        // Strong coefficients survive selection with roughly correct values.
        assert!((model.coefs[0] - 1.5).abs() < 0.15, "{}", model.coefs[0]);
        assert!((model.coefs[1] + 0.7).abs() < 0.15, "{}", model.coefs[1]);
    }

    #[test]
    fn kkt_conditions_hold_at_selected_lambda() {
        let (xs, ys) = toy_regression(54, 200, 4);
        let model = LassoModel::fit_cv(&xs, &ys, Family::Continuous, &LassoParams::default(), 10);
        let lambda = model.selected_lambda;
        // Recompute the standardized subgradient independently.
        let n = ys.len();
        let std = standardize(&xs);
        let resid: Vec<f64> = (0..n).map(|i| ys[i] - model.predict(&xs[i])).collect();
        for (k, &j) in std.active.iter().enumerate() {
            let g: f64 = std.cols[k]
                .iter()
                .zip(&resid)
                .map(|(x, r)| x * r)
                .sum::<f64>()
                / n as f64;
            let beta_std = model.coefs[j] * std.sds[k];
            if beta_std == 0.0 {
                assert!(g.abs() <= lambda + 1e-6, "inactive KKT: |{g}| vs {lambda}");
            } else {
                assert!(
                    (g - lambda * beta_std.signum()).abs() <= 1e-6,
                    "active KKT: {g} vs {}",
                    lambda * beta_std.signum()
                );
            }
        }
    }
}
