//! A finite-support law used as an exact oracle: `X` is binary, `Z | X`
//! and `A | Z, X` are Bernoulli, and `Y | A, Z, X` takes two equally
//! likely points. The conditional outcome means are constructed so the
//! law's `(delta, tau, rho)` are exactly the supplied tables:
//!
//! ```text
//! E(Y | A=a, Z=z, X=x) = e0(z, x) + a (delta(x) + D(z, x))
//!     with D = rho(x) / sigma2(z, x),  e0 = tau(z, x) - mu(z, x) D
//! ```
//!
//! which gives `E(Y - delta A | Z, X) = tau` and
//! `E{(A - mu)(Y - delta A) | Z, X} = rho(X)` for any `(z, x)`. All
//! expectations are computed by enumerating the 16 atoms, so identities
//! hold to machine precision — entirely independent of the estimators.

use std::sync::Arc;

use ivmr::data::ObsRef;
use ivmr::influence::{sigma2, NuisanceBundle};

/// Nuisance functions as tables over the binary covariate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tables {
    /// `P(Z = 1 | X = x)`.
    pub pi1: [f64; 2],
    /// `mu[z][x]`.
    pub mu: [[f64; 2]; 2],
    pub delta: [f64; 2],
    /// `tau[z][x]`.
    pub tau: [[f64; 2]; 2],
    pub rho: [f64; 2],
}

impl Tables {
    pub fn to_bundle(self) -> NuisanceBundle {
        let t = self;
        NuisanceBundle::new(
            Arc::new(move |x: &[f64]| t.pi1[xi(x)]),
            Arc::new(move |z: u8, x: &[f64]| t.mu[z as usize][xi(x)]),
            Arc::new(move |x: &[f64]| t.delta[xi(x)]),
            Arc::new(move |z: u8, x: &[f64]| t.tau[z as usize][xi(x)]),
            Arc::new(move |x: &[f64]| t.rho[xi(x)]),
        )
    }

    /// Linear interpolation `truth + t * (other - truth)` applied to every
    /// table entry; used for directional-derivative checks.
    pub fn blend(&self, other: &Tables, t: f64, roles: &[usize]) -> Tables {
        let mut out = *self;
        for &role in roles {
            match role {
                0 => {
                    for x in 0..2 {
                        out.pi1[x] += t * (other.pi1[x] - self.pi1[x]);
                    }
                }
                1 => {
                    for z in 0..2 {
                        for x in 0..2 {
                            out.mu[z][x] += t * (other.mu[z][x] - self.mu[z][x]);
                        }
                    }
                }
                2 => {
                    for x in 0..2 {
                        out.delta[x] += t * (other.delta[x] - self.delta[x]);
                    }
                }
                3 => {
                    for z in 0..2 {
                        for x in 0..2 {
                            out.tau[z][x] += t * (other.tau[z][x] - self.tau[z][x]);
                        }
                    }
                }
                4 => {
                    for x in 0..2 {
                        out.rho[x] += t * (other.rho[x] - self.rho[x]);
                    }
                }
                _ => panic!("role out of range"),
            }
        }
        out
    }

    /// Replace the given roles with `other`'s tables.
    pub fn with_roles_from(&self, other: &Tables, roles: &[usize]) -> Tables {
        self.blend(other, 1.0, roles)
    }
}

fn xi(x: &[f64]) -> usize {
    usize::from(x[0] > 0.5)
}

/// The discrete law: truth tables plus the marginal of `X` and the
/// two-point outcome spread.
#[derive(Debug, Clone, Copy)]
pub struct DiscreteLaw {
    pub truth: Tables,
    pub px1: f64,
    pub y_spread: f64,
}

impl DiscreteLaw {
    /// A fixed regular instance: propensities well inside (0, 1) and the
    /// instrument-arm variance gap bounded away from zero, so no trimming
    /// ever binds.
    pub fn standard() -> Self {
        DiscreteLaw {
            truth: Tables {
                pi1: [0.45, 0.60],
                mu: [[0.85, 0.90], [0.60, 0.55]],
                delta: [1.2, -0.4],
                tau: [[0.5, -0.3], [-0.8, 0.9]],
                rho: [0.15, -0.05],
            },
            px1: 0.4,
            y_spread: 0.7,
        }
    }

    /// Bounded perturbations of every table, keeping probabilities interior
    /// and variance gaps away from zero.
    pub fn perturbed(&self) -> Tables {
        let t = self.truth;
        Tables {
            pi1: [t.pi1[0] + 0.12, t.pi1[1] - 0.10],
            mu: [
                [t.mu[0][0] + 0.04, t.mu[0][1] - 0.05],
                [t.mu[1][0] - 0.06, t.mu[1][1] + 0.05],
            ],
            delta: [t.delta[0] + 0.5, t.delta[1] - 0.35],
            tau: [
                [t.tau[0][0] + 0.4, t.tau[0][1] - 0.3],
                [t.tau[1][0] + 0.25, t.tau[1][1] + 0.5],
            ],
            rho: [t.rho[0] - 0.2, t.rho[1] + 0.12],
        }
    }

    /// The target parameter, by definition `E delta(X)`.
    pub fn delta_target(&self) -> f64 {
        (1.0 - self.px1) * self.truth.delta[0] + self.px1 * self.truth.delta[1]
    }

    fn outcome_mean(&self, a: usize, z: usize, x: usize) -> f64 {
        let t = &self.truth;
        let mu = t.mu[z][x];
        let d = t.rho[x] / sigma2(mu);
        let e0 = t.tau[z][x] - mu * d;
        e0 + a as f64 * (t.delta[x] + d)
    }

    /// Exact expectation of `f` over the 16 atoms.
    pub fn expect<F: Fn(ObsRef<'_>) -> f64>(&self, f: F) -> f64 {
        let mut total = 0.0;
        for x in 0..2usize {
            let px = if x == 1 { self.px1 } else { 1.0 - self.px1 };
            let xv = [x as f64];
            for z in 0..2usize {
                let pz = if z == 1 {
                    self.truth.pi1[x]
                } else {
                    1.0 - self.truth.pi1[x]
                };
                for a in 0..2usize {
                    let pa = if a == 1 {
                        self.truth.mu[z][x]
                    } else {
                        1.0 - self.truth.mu[z][x]
                    };
                    let e = self.outcome_mean(a, z, x);
                    for sign in [-1.0, 1.0] {
                        let w = px * pz * pa * 0.5;
                        let o = ObsRef {
                            y: e + sign * self.y_spread,
                            a: a as u8,
                            z: z as u8,
                            x: &xv,
                        };
                        total += w * f(o);
                    }
                }
            }
        }
        total
    }

    /// Exact conditional expectation given `X = x`.
    pub fn expect_given_x<F: Fn(ObsRef<'_>) -> f64>(&self, x: usize, f: F) -> f64 {
        let ind = move |o: ObsRef<'_>| if xi(o.x) == x { f(o) } else { 0.0 };
        let px = if x == 1 { self.px1 } else { 1.0 - self.px1 };
        self.expect(ind) / px
    }

    /// Exact conditional expectation given `Z = z, X = x`.
    pub fn expect_given_zx<F: Fn(ObsRef<'_>) -> f64>(&self, z: usize, x: usize, f: F) -> f64 {
        let ind = move |o: ObsRef<'_>| {
            if xi(o.x) == x && usize::from(o.z) == z {
                f(o)
            } else {
                0.0
            }
        };
        let px = if x == 1 { self.px1 } else { 1.0 - self.px1 };
        let pz = if z == 1 {
            self.truth.pi1[x]
        } else {
            1.0 - self.truth.pi1[x]
        };
        self.expect(ind) / (px * pz)
    }
}
