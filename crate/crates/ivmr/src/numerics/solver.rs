//! Damped Newton solver for just-identified moment systems, and central
//! difference Jacobians.

use nalgebra::{DMatrix, DVector};

use super::{FitResult, SolverConfig, DAMPING_FLOOR};
use crate::error::{IvmrError, Result};

/// Central-difference Jacobian of `f` at `at` with per-coordinate step
/// `step * max(1, |at_j|)`. Returns an `e x d` matrix.
pub fn numeric_jacobian<F>(f: &F, at: &DVector<f64>, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let d = at.len();
    let probe = f(at);
    if probe.iter().any(|v| !v.is_finite()) {
        return Err(IvmrError::NonFiniteEvaluation);
    }
    let e = probe.len();
    let mut jac = DMatrix::zeros(e, d);
    let mut point = at.clone();
    for j in 0..d {
        let h = step * at[j].abs().max(1.0);
        point[j] = at[j] + h;
        let fp = f(&point);
        point[j] = at[j] - h;
        let fm = f(&point);
        point[j] = at[j];
        if fp.iter().chain(fm.iter()).any(|v| !v.is_finite()) {
            return Err(IvmrError::NonFiniteEvaluation);
        }
        let scale = 1.0 / (2.0 * h);
        for i in 0..e {
            jac[(i, j)] = (fp[i] - fm[i]) * scale;
        }
    }
    Ok(jac)
}

fn forward_jacobian<F>(g: &F, at: &DVector<f64>, f_at: &DVector<f64>, step: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let d = at.len();
    let e = f_at.len();
    let mut jac = DMatrix::zeros(e, d);
    let mut point = at.clone();
    for j in 0..d {
        let h = step * at[j].abs().max(1.0);
        point[j] = at[j] + h;
        let fp = g(&point);
        point[j] = at[j];
        for i in 0..e {
            jac[(i, j)] = (fp[i] - f_at[i]) / h;
        }
    }
    jac
}

/// Solve `g(psi) = 0` by damped Newton iteration with a forward-difference
/// Jacobian.
///
/// The step is halved while the moment max-norm does not decrease, down to
/// a floor of `2^-20`. A singular Jacobian is retried once from a slightly
/// perturbed evaluation point; if still singular, a Broyden rank-one update
/// of the previous iteration's Jacobian is used instead. After convergence
/// one full polishing step is attempted so the returned point is stable to
/// tiny perturbations of the moment function.
pub fn solve_moment_system<F>(g: &F, init: &DVector<f64>, config: &SolverConfig) -> Result<FitResult>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let d = init.len();
    let mut psi = init.clone();
    let mut f = g(&psi);
    if f.len() != d {
        return Err(IvmrError::Invalid(format!(
            "moment system must be just-identified: dim(g)={}, dim(psi)={d}",
            f.len()
        )));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(IvmrError::NonFiniteEvaluation);
    }
    let mut norm = f.amax();
    let mut prev: Option<(DMatrix<f64>, DVector<f64>, DVector<f64>)> = None; // (J, psi, f)

    for iteration in 0..config.max_iter {
        if norm <= config.tol {
            return Ok(polish(g, psi, f, norm, iteration, config));
        }
        let jac = forward_jacobian(g, &psi, &f, config.jacobian_step);
        let direction = match jac.clone().lu().solve(&(-&f)) {
            Some(dir) => dir,
            None => {
                // Retry once from a perturbed evaluation point.
                let bumped = DVector::from_iterator(
                    d,
                    psi.iter()
                        .map(|&v| v + 10.0 * config.jacobian_step * v.abs().max(1.0)),
                );
                let f_b = g(&bumped);
                let jac_b = forward_jacobian(g, &bumped, &f_b, config.jacobian_step);
                match jac_b.lu().solve(&(-&f)) {
                    Some(dir) => dir,
                    None => match &prev {
                        Some((jp, psip, fp)) => {
                            // Broyden update: J += (df - J dpsi) dpsi' / (dpsi' dpsi).
                            let dpsi = &psi - psip;
                            let df = &f - fp;
                            let denom = dpsi.dot(&dpsi);
                            if denom <= 0.0 {
                                return Err(IvmrError::SingularJacobian);
                            }
                            let corr = (&df - jp * &dpsi) / denom;
                            let jb = jp + corr * dpsi.transpose();
                            jb.lu()
                                .solve(&(-&f))
                                .ok_or(IvmrError::SingularJacobian)?
                        }
                        None => return Err(IvmrError::SingularJacobian),
                    },
                }
            }
        };

        let mut t = 1.0;
        let mut accepted = None;
        while t >= DAMPING_FLOOR {
            let candidate = &psi + &direction * t;
            let fc = g(&candidate);
            let nc = fc.amax();
            if nc.is_finite() && nc < norm {
                accepted = Some((candidate, fc, nc));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((candidate, fc, nc)) => {
                prev = Some((jac, std::mem::replace(&mut psi, candidate), f));
                f = fc;
                norm = nc;
            }
            None => {
                return Err(IvmrError::NoConvergence {
                    iterations: iteration + 1,
                    residual: norm,
                })
            }
        }
    }
    if norm <= config.tol {
        return Ok(polish(g, psi, f, norm, config.max_iter, config));
    }
    Err(IvmrError::NoConvergence {
        iterations: config.max_iter,
        residual: norm,
    })
}

fn polish<F>(
    g: &F,
    psi: DVector<f64>,
    f: DVector<f64>,
    norm: f64,
    iterations: usize,
    config: &SolverConfig,
) -> FitResult
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let jac = forward_jacobian(g, &psi, &f, config.jacobian_step);
    if let Some(dir) = jac.lu().solve(&(-&f)) {
        let candidate = &psi + dir;
        let fc = g(&candidate);
        let nc = fc.amax();
        if nc.is_finite() && nc <= norm {
            return FitResult {
                coefficients: candidate,
                converged: true,
                iterations: iterations + 1,
                final_gradient_norm: nc,
                separation: false,
            };
        }
    }
    FitResult {
        coefficients: psi,
        converged: true,
        iterations,
        final_gradient_norm: norm,
        separation: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_root() {
        let g = |x: &DVector<f64>| DVector::from_vec(vec![x[0] * x[0] - 4.0]);
        let fit = solve_moment_system(&g, &DVector::from_vec(vec![3.0]), &SolverConfig::default())
            .unwrap();
        assert!(fit.converged);
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn linear_map_solves_in_one_step() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.5, -3.0]);
        let b = DVector::from_vec(vec![1.0, -2.0]);
        let a2 = a.clone();
        let g = move |x: &DVector<f64>| &a2 * x - &b;
        let fit = solve_moment_system(
            &g,
            &DVector::from_vec(vec![10.0, -7.0]),
            &SolverConfig::default(),
        )
        .unwrap();
        let expected = a
            .lu()
            .solve(&DVector::from_vec(vec![1.0, -2.0]))
            .unwrap();
        assert!((fit.coefficients - expected).amax() < 1e-7);
        // One Newton iteration plus at most the polish step.
        assert!(fit.iterations <= 2, "iterations={}", fit.iterations);
    }

    #[test]
    fn jacobian_of_square() {
        let f = |x: &DVector<f64>| DVector::from_vec(vec![x[0] * x[0]]);
        let j = numeric_jacobian(&f, &DVector::from_vec(vec![3.0]), 1e-6).unwrap();
        assert!((j[(0, 0)] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn jacobian_exact_for_linear_map() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 4.0, -1.0]);
        let m2 = m.clone();
        let f = move |x: &DVector<f64>| &m2 * x;
        let j = numeric_jacobian(&f, &DVector::from_vec(vec![0.3, -1.2, 2.0]), 1e-6).unwrap();
        assert!((j - m).amax() < 1e-9);
    }

    #[test]
    fn jacobian_step_refinement_oracle() {
        // A smooth nonlinear map: the coarse-step Jacobian must agree with
        // a 10x finer step to 1e-5 relative.
        let f = |x: &DVector<f64>| {
            DVector::from_vec(vec![
                (x[0] * x[1]).sin() + x[1].powi(3),
                (x[0] - 0.3).exp() * x[1],
            ])
        };
        let at = DVector::from_vec(vec![0.7, -1.1]);
        let coarse = numeric_jacobian(&f, &at, 1e-4).unwrap();
        let fine = numeric_jacobian(&f, &at, 1e-5).unwrap();
        let denom = fine.amax().max(1.0);
        assert!((coarse - fine).amax() / denom < 1e-5);
    }

    #[test]
    fn non_finite_evaluation_detected() {
        let f = |x: &DVector<f64>| DVector::from_vec(vec![x[0].sqrt()]);
        assert!(matches!(
            numeric_jacobian(&f, &DVector::from_vec(vec![0.0]), 1e-6),
            Err(IvmrError::NonFiniteEvaluation)
        ));
    }
}
