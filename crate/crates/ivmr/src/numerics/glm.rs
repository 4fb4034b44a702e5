//! Logistic regression via iteratively reweighted least squares, and
//! ordinary least squares with a rank-revealing solve.

use nalgebra::{DMatrix, DVector};

use super::{expit, FitResult, SolverConfig};
use crate::error::{IvmrError, Result};

const SEPARATION_NORM: f64 = 30.0;
const WEIGHT_FLOOR: f64 = 1e-10;

/// Maximize the binomial log-likelihood of `y` on `design` by IRLS.
///
/// Convergence is declared when the mean score `design' (y - p) / n` has
/// max-abs value at most `config.tol`; one extra Newton step is taken after
/// convergence so the returned point does not depend on which side of the
/// tolerance the iteration stopped. A coefficient max-norm above 30 is
/// treated as separation: the fit stops and is returned unconverged with
/// the `separation` flag set.
pub fn fit_logistic(design: &DMatrix<f64>, y: &[f64], config: &SolverConfig) -> Result<FitResult> {
    let n = design.nrows();
    let q = design.ncols();
    assert_eq!(n, y.len(), "design/response length mismatch");
    if n < q {
        return Err(IvmrError::Invalid(format!(
            "logistic fit needs n >= q (n={n}, q={q})"
        )));
    }
    for j in 0..q {
        if design.column(j).iter().all(|&v| v == 0.0) {
            return Err(IvmrError::Invalid(format!("design column {j} is all zero")));
        }
    }

    let mut beta = DVector::zeros(q);
    let mut eta = design * &beta;
    let mut iterations = 0;
    let mut polished = false;
    loop {
        let p = eta.map(expit);
        let resid = DVector::from_iterator(n, y.iter().zip(p.iter()).map(|(&yi, &pi)| yi - pi));
        let score = design.transpose() * &resid / n as f64;
        let norm = score.amax();

        if norm <= config.tol {
            // A vanishing score with every fitted probability saturated is
            // (quasi-)separation: the likelihood maximum sits at infinity.
            if p.iter().all(|&pi| pi <= 1e-7 || pi >= 1.0 - 1e-7) {
                return Ok(FitResult {
                    coefficients: beta,
                    converged: false,
                    iterations,
                    final_gradient_norm: norm,
                    separation: true,
                });
            }
            if polished {
                return Ok(FitResult {
                    coefficients: beta,
                    converged: true,
                    iterations,
                    final_gradient_norm: norm,
                    separation: false,
                });
            }
        }
        if iterations >= config.max_iter {
            return Ok(FitResult {
                coefficients: beta,
                converged: norm <= config.tol,
                iterations,
                final_gradient_norm: norm,
                separation: false,
            });
        }
        polished = norm <= config.tol;

        // Weighted normal equations X' W X d = X' (y - p).
        let mut xtwx = DMatrix::zeros(q, q);
        for i in 0..n {
            let w = (p[i] * (1.0 - p[i])).max(WEIGHT_FLOOR);
            let xi = design.row(i);
            for r in 0..q {
                let wr = w * xi[r];
                for c in r..q {
                    xtwx[(r, c)] += wr * xi[c];
                }
            }
        }
        for r in 0..q {
            for c in 0..r {
                xtwx[(r, c)] = xtwx[(c, r)];
            }
        }
        let xtr = design.transpose() * &resid;
        let step = xtwx
            .lu()
            .solve(&xtr)
            .ok_or(IvmrError::SingularWeightedSystem)?;
        beta += &step;
        iterations += 1;

        if beta.amax() > SEPARATION_NORM {
            let p = (design * &beta).map(expit);
            let resid =
                DVector::from_iterator(n, y.iter().zip(p.iter()).map(|(&yi, &pi)| yi - pi));
            let norm = (design.transpose() * &resid / n as f64).amax();
            return Ok(FitResult {
                coefficients: beta,
                converged: false,
                iterations,
                final_gradient_norm: norm,
                separation: true,
            });
        }
        eta = design * &beta;
    }
}

/// Least-squares coefficients of `y` on `design`.
///
/// The solve is rank-revealing (SVD); a design without full column rank is
/// rejected rather than silently regularized.
pub fn fit_ols(design: &DMatrix<f64>, y: &[f64]) -> Result<FitResult> {
    let n = design.nrows();
    let q = design.ncols();
    assert_eq!(n, y.len(), "design/response length mismatch");
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (n.max(q) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < q {
        return Err(IvmrError::RankDeficient { rank, cols: q });
    }
    let rhs = DVector::from_column_slice(y);
    let beta = svd
        .solve(&rhs, tol)
        .map_err(|_| IvmrError::RankDeficient { rank, cols: q })?;
    let resid = &rhs - design * &beta;
    let norm = (design.transpose() * &resid / n as f64).amax();
    Ok(FitResult {
        coefficients: beta,
        converged: true,
        iterations: 1,
        final_gradient_norm: norm,
        separation: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_from_seed;
    use rand::Rng;

    fn ones(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, 1.0)
    }

    #[test]
    fn intercept_only_logit_closed_forms() {
        let y = vec![1.0, 0.0, 1.0, 0.0];
        let fit = fit_logistic(&ones(4), &y, &SolverConfig::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.coefficients[0].abs() < 1e-9);

        let y = vec![1.0, 1.0, 1.0, 0.0];
        let fit = fit_logistic(&ones(4), &y, &SolverConfig::default()).unwrap();
        assert!((fit.coefficients[0] - 3.0f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn separation_flagged_on_constant_response() {
        let y = vec![1.0; 50];
        let fit = fit_logistic(&ones(50), &y, &SolverConfig::default()).unwrap();
        assert!(fit.separation);
        assert!(!fit.converged);
    }

    #[test]
    fn two_column_fit_matches_grid_search_oracle() {
        // Data from a known (b0, b1) = (-1, 2); the oracle is a direct
        // grid search of the log-likelihood around the truth.
        let mut rng = rng_from_seed(11);
        let n = 200;
        let mut design = DMatrix::zeros(n, 2);
        let mut y = vec![0.0; n];
        for i in 0..n {
            let x: f64 = rng.gen_range(-2.0..2.0);
            design[(i, 0)] = 1.0;
            design[(i, 1)] = x;
            let p = expit(-1.0 + 2.0 * x);
            y[i] = if rng.gen::<f64>() < p { 1.0 } else { 0.0 };
        }
        let fit = fit_logistic(&design, &y, &SolverConfig::default()).unwrap();
        assert!(fit.converged);

        let loglik = |b0: f64, b1: f64| -> f64 {
            (0..n)
                .map(|i| {
                    let eta = b0 + b1 * design[(i, 1)];
                    y[i] * eta - (1.0 + eta.exp()).ln()
                })
                .sum()
        };
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        let mut b0 = -2.5;
        while b0 <= 0.5 {
            let mut b1 = 0.5;
            while b1 <= 3.5 {
                let ll = loglik(b0, b1);
                if ll > best.0 {
                    best = (ll, b0, b1);
                }
                b1 += 0.02;
            }
            b0 += 0.02;
        }
        assert!((fit.coefficients[0] - best.1).abs() <= 0.021);
        assert!((fit.coefficients[1] - best.2).abs() <= 0.021);
        assert!(loglik(fit.coefficients[0], fit.coefficients[1]) >= best.0 - 1e-9);
        // Score equations hold at the fit.
        assert!(fit.final_gradient_norm <= 1e-8);
    }

    #[test]
    fn ols_closed_forms() {
        let fit = fit_ols(&ones(2), &[3.0, 5.0]).unwrap();
        assert!((fit.coefficients[0] - 4.0).abs() < 1e-12);

        let design = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let fit = fit_ols(&design, &[1.0, 3.0]).unwrap();
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ols_matches_normal_equations_oracle() {
        let mut rng = rng_from_seed(12);
        let n = 50;
        let q = 3;
        let mut design = DMatrix::zeros(n, q);
        let mut y = vec![0.0; n];
        for i in 0..n {
            for j in 0..q {
                design[(i, j)] = rng.gen_range(-1.0..1.0);
            }
            y[i] = rng.gen_range(-1.0..1.0);
        }
        let fit = fit_ols(&design, &y).unwrap();
        // Independent route: solve X'X b = X'y directly.
        let xtx = design.transpose() * &design;
        let xty = design.transpose() * DVector::from_column_slice(&y);
        let oracle = xtx.lu().solve(&xty).unwrap();
        assert!((&fit.coefficients - &oracle).amax() < 1e-10);
    }

    #[test]
    fn ols_rejects_rank_deficiency() {
        let mut design = DMatrix::zeros(5, 2);
        for i in 0..5 {
            design[(i, 0)] = 1.0;
            design[(i, 1)] = 2.0;
        }
        assert!(matches!(
            fit_ols(&design, &[0.0; 5]),
            Err(IvmrError::RankDeficient { .. })
        ));
    }
}
