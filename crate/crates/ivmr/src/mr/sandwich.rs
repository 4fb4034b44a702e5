//! Sandwich covariance for stacked method-of-moments fits.

use nalgebra::{DMatrix, DVector};

use crate::error::{IvmrError, Result};
use crate::numerics::numeric_jacobian;

/// `J^{-1} M J^{-T}` for a stacked moment system solved at `psi_hat`.
///
/// `mean_moments` maps a parameter vector to the empirical mean of the
/// stacked per-observation moments; its numeric Jacobian at `psi_hat` is
/// the bread `J`. `contributions` holds the per-observation moment values
/// at `psi_hat` (one row per observation); their empirical second moment is
/// the meat `M`. The returned matrix is the asymptotic covariance of
/// `sqrt(n) (psi_hat - psi*)`; divide diagonal entries by `n` for variances
/// of the estimates. The result is symmetrized.
pub fn sandwich_variance<F>(
    mean_moments: &F,
    contributions: &DMatrix<f64>,
    psi_hat: &DVector<f64>,
    jacobian_step: f64,
) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = contributions.nrows();
    let m = contributions.ncols();
    assert_eq!(m, psi_hat.len(), "moment/parameter dimension mismatch");

    let jac = numeric_jacobian(mean_moments, psi_hat, jacobian_step)?;
    let meat = contributions.transpose() * contributions / n as f64;

    let lu = jac.lu();
    // cov = J^{-1} M J^{-T}: solve J A = M, then J B = A', cov = B'.
    let a = lu.solve(&meat).ok_or(IvmrError::SingularJacobian)?;
    let at = a.transpose();
    let b = lu.solve(&at).ok_or(IvmrError::SingularJacobian)?;
    let cov = b.transpose();
    Ok((&cov + cov.transpose()) * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{kahan_mean, rng_from_seed};
    use rand::Rng;

    #[test]
    fn sample_mean_moment_recovers_variance_over_n() {
        let mut rng = rng_from_seed(5);
        let y: Vec<f64> = (0..500).map(|_| rng.gen_range(-2.0..5.0)).collect();
        let n = y.len();
        let mean = kahan_mean(&y);

        let mean_fn = |p: &DVector<f64>| DVector::from_vec(vec![mean - p[0]]);
        let mut contributions = DMatrix::zeros(n, 1);
        for (i, &v) in y.iter().enumerate() {
            contributions[(i, 0)] = v - mean;
        }
        let cov = sandwich_variance(
            &mean_fn,
            &contributions,
            &DVector::from_vec(vec![mean]),
            1e-6,
        )
        .unwrap();
        // Empirical (1/n) variance of contributions, divided by n.
        let var = kahan_mean(&y.iter().map(|v| (v - mean) * (v - mean)).collect::<Vec<_>>());
        assert!((cov[(0, 0)] / n as f64 - var / n as f64).abs() < 1e-12);
    }

    #[test]
    fn intercept_logistic_matches_information_closed_form() {
        let mut rng = rng_from_seed(6);
        let y: Vec<f64> = (0..800)
            .map(|_| if rng.gen::<f64>() < 0.3 { 1.0 } else { 0.0 })
            .collect();
        let n = y.len();
        let p_hat = kahan_mean(&y);
        let beta = (p_hat / (1.0 - p_hat)).ln();

        let mean_fn = |b: &DVector<f64>| {
            let p = crate::numerics::expit(b[0]);
            DVector::from_vec(vec![kahan_mean(&y) - p])
        };
        let mut contributions = DMatrix::zeros(n, 1);
        for (i, &v) in y.iter().enumerate() {
            contributions[(i, 0)] = v - p_hat;
        }
        let cov = sandwich_variance(
            &mean_fn,
            &contributions,
            &DVector::from_vec(vec![beta]),
            1e-6,
        )
        .unwrap();
        let analytic = 1.0 / (p_hat * (1.0 - p_hat));
        assert!(
            (cov[(0, 0)] - analytic).abs() < 1e-6 * analytic,
            "got {} want {analytic}",
            cov[(0, 0)]
        );
    }
}
