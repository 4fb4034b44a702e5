//! Pointwise evaluation of the identification moment functions and the
//! efficient influence function.
//!
//! All estimators in the crate are built on five nuisance functions:
//!
//! * `pi(z | x)` — instrument propensity, constructed from a single
//!   probability function so `pi(1|x) + pi(0|x) = 1` by construction;
//! * `mu(z, x)` — treatment propensity, with `sigma2(z, x) = mu (1 - mu)`;
//! * `delta(x)` — conditional average treatment effect;
//! * `tau(z, x)` — instrument-arm outcome level `E(Y - delta(X) A | Z, X)`;
//! * `rho(x)` — residual covariance `E{(A - mu)(Y - delta(X) A) | X}`.
//!
//! The moment functions:
//!
//! ```text
//! phi1 = (2Z-1) (A - mu(Z,X)) Y / [pi(Z|X) (sigma2(1,X) - sigma2(0,X))]
//! phi2 = (2Z-1) A (Y - delta(X) A - tau(Z,X)) / pi(Z|X)
//! phi3 = (A - mu(Z,X)) (Y - delta(X) A) - rho(X)
//! phi_eff = (2Z-1) [(A - mu)(Y - delta A - tau) - rho]
//!             / [pi(Z|X) (sigma2(1,X) - sigma2(0,X))] + delta(X)
//! ```
//!
//! `delta(X) A` always uses the observed treatment indicator. The empirical
//! mean of `phi_eff` is the locally efficient ATE estimate; it is consistent
//! whenever one of the nuisance sets `(pi, mu)`, `(pi, delta, tau)` or
//! `(mu, delta, rho)` is correct.
//!
//! Division by `pi` and by the arm difference of `sigma2` is guarded by a
//! [`TrimPolicy`]: probabilities are clamped away from 0/1 and the
//! denominator magnitude is floored (sign preserved), with counters
//! recording how often either guard fired.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::data::{Dataset, ObsRef};
use crate::error::{IvmrError, Result};

/// Evaluator of a function of the covariates.
pub type XFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Evaluator of a function of `(z, x)`.
pub type ZxFn = Arc<dyn Fn(u8, &[f64]) -> f64 + Send + Sync>;

/// Bernoulli variance `mu (1 - mu)`.
pub fn sigma2(mu: f64) -> f64 {
    mu * (1.0 - mu)
}

/// Counters of trimmed evaluations; shared across threads.
#[derive(Debug, Default)]
pub struct TrimCounters {
    pi: AtomicU64,
    denom: AtomicU64,
}

/// Snapshot of [`TrimCounters`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct TrimCounts {
    pub pi_clamped: u64,
    pub denom_clamped: u64,
}

/// Clamping rules applied when evaluating the moment functions.
#[derive(Debug)]
pub struct TrimPolicy {
    /// `pi` is clamped into `[pi_clamp, 1 - pi_clamp]`.
    pub pi_clamp: f64,
    /// `|sigma2(1,x) - sigma2(0,x)|` is floored at this value, keeping sign.
    pub denom_floor: f64,
    record: TrimCounters,
}

impl Default for TrimPolicy {
    fn default() -> Self {
        TrimPolicy::new(0.01, 1e-3).unwrap()
    }
}

impl TrimPolicy {
    pub fn new(pi_clamp: f64, denom_floor: f64) -> Result<Self> {
        if !(pi_clamp > 0.0 && pi_clamp < 0.5) {
            return Err(IvmrError::Invalid(format!(
                "pi_clamp must lie in (0, 0.5), got {pi_clamp}"
            )));
        }
        if !(denom_floor > 0.0) {
            return Err(IvmrError::Invalid(format!(
                "denom_floor must be positive, got {denom_floor}"
            )));
        }
        Ok(TrimPolicy {
            pi_clamp,
            denom_floor,
            record: TrimCounters::default(),
        })
    }

    /// Same thresholds, fresh counters.
    pub fn fresh(&self) -> Self {
        TrimPolicy::new(self.pi_clamp, self.denom_floor).unwrap()
    }

    pub fn counts(&self) -> TrimCounts {
        TrimCounts {
            pi_clamped: self.record.pi.load(Ordering::Relaxed),
            denom_clamped: self.record.denom.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.record.pi.store(0, Ordering::Relaxed);
        self.record.denom.store(0, Ordering::Relaxed);
    }

    #[inline]
    pub fn trim_pi(&self, pi: f64) -> f64 {
        let lo = self.pi_clamp;
        let hi = 1.0 - self.pi_clamp;
        if pi < lo {
            self.record.pi.fetch_add(1, Ordering::Relaxed);
            lo
        } else if pi > hi {
            self.record.pi.fetch_add(1, Ordering::Relaxed);
            hi
        } else {
            pi
        }
    }

    /// Floor the magnitude of the heteroscedasticity denominator,
    /// preserving its sign (an exact zero is pushed to `+denom_floor`).
    #[inline]
    pub fn trim_denom(&self, d: f64) -> f64 {
        if d.abs() >= self.denom_floor {
            d
        } else {
            self.record.denom.fetch_add(1, Ordering::Relaxed);
            if d < 0.0 {
                -self.denom_floor
            } else {
                self.denom_floor
            }
        }
    }
}

/// The five nuisance evaluations needed at one observation.
#[derive(Debug, Clone, Copy)]
pub struct NuisanceValues {
    /// `P(Z = 1 | x)`.
    pub pi1: f64,
    /// `mu(1, x)`.
    pub mu1: f64,
    /// `mu(0, x)`.
    pub mu0: f64,
    pub delta: f64,
    /// `tau(z_obs, x)`.
    pub tau: f64,
    pub rho: f64,
}

impl NuisanceValues {
    #[inline]
    pub fn pi_obs(&self, z: u8) -> f64 {
        if z == 1 {
            self.pi1
        } else {
            1.0 - self.pi1
        }
    }

    #[inline]
    pub fn mu_obs(&self, z: u8) -> f64 {
        if z == 1 {
            self.mu1
        } else {
            self.mu0
        }
    }
}

#[inline]
fn sign_z(z: u8) -> f64 {
    if z == 1 {
        1.0
    } else {
        -1.0
    }
}

/// `phi1` from raw values.
#[inline]
pub fn phi1_at(y: f64, a: u8, z: u8, v: &NuisanceValues, trim: &TrimPolicy) -> f64 {
    let pi = trim.trim_pi(v.pi_obs(z));
    let denom = trim.trim_denom(sigma2(v.mu1) - sigma2(v.mu0));
    sign_z(z) * (f64::from(a) - v.mu_obs(z)) * y / (pi * denom)
}

/// `phi2` from raw values.
#[inline]
pub fn phi2_at(y: f64, a: u8, z: u8, v: &NuisanceValues, trim: &TrimPolicy) -> f64 {
    if a == 0 {
        return 0.0;
    }
    let pi = trim.trim_pi(v.pi_obs(z));
    sign_z(z) * (y - v.delta - v.tau) / pi
}

/// `phi3` from raw values.
#[inline]
pub fn phi3_at(y: f64, a: u8, z: u8, v: &NuisanceValues) -> f64 {
    let af = f64::from(a);
    (af - v.mu_obs(z)) * (y - v.delta * af) - v.rho
}

/// Efficient influence function (plus `Delta`) from raw values.
#[inline]
pub fn phi_eff_at(y: f64, a: u8, z: u8, v: &NuisanceValues, trim: &TrimPolicy) -> f64 {
    let pi = trim.trim_pi(v.pi_obs(z));
    let denom = trim.trim_denom(sigma2(v.mu1) - sigma2(v.mu0));
    let af = f64::from(a);
    let resid = (af - v.mu_obs(z)) * (y - v.delta * af - v.tau) - v.rho;
    sign_z(z) * resid / (pi * denom) + v.delta
}

/// Opaque evaluators for the five nuisance functions. Parametric fits and
/// machine learners both expose this shape, so every estimator shares one
/// influence-function code path. Cloning is cheap (shared closures).
#[derive(Clone)]
pub struct NuisanceBundle {
    pi1: XFn,
    mu: ZxFn,
    delta: XFn,
    tau: ZxFn,
    rho: XFn,
}

impl std::fmt::Debug for NuisanceBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("NuisanceBundle {..}")
    }
}

impl NuisanceBundle {
    /// `pi1` is `P(Z = 1 | x)`; `pi(z|x)` is derived from it so the two
    /// arms always sum to one.
    pub fn new(pi1: XFn, mu: ZxFn, delta: XFn, tau: ZxFn, rho: XFn) -> Self {
        NuisanceBundle {
            pi1,
            mu,
            delta,
            tau,
            rho,
        }
    }

    pub fn pi(&self, z: u8, x: &[f64]) -> f64 {
        let p = (self.pi1)(x);
        if z == 1 {
            p
        } else {
            1.0 - p
        }
    }

    pub fn mu(&self, z: u8, x: &[f64]) -> f64 {
        (self.mu)(z, x)
    }

    pub fn delta(&self, x: &[f64]) -> f64 {
        (self.delta)(x)
    }

    pub fn tau(&self, z: u8, x: &[f64]) -> f64 {
        (self.tau)(z, x)
    }

    pub fn rho(&self, x: &[f64]) -> f64 {
        (self.rho)(x)
    }

    pub fn sigma2(&self, z: u8, x: &[f64]) -> f64 {
        sigma2(self.mu(z, x))
    }

    /// Evaluate every nuisance at one observation.
    pub fn values(&self, z: u8, x: &[f64]) -> NuisanceValues {
        NuisanceValues {
            pi1: (self.pi1)(x),
            mu1: (self.mu)(1, x),
            mu0: (self.mu)(0, x),
            delta: (self.delta)(x),
            tau: (self.tau)(z, x),
            rho: (self.rho)(x),
        }
    }
}

/// `phi1(O; pi, mu)`; reads only `pi` and `mu` from the bundle.
pub fn phi1(o: ObsRef<'_>, bundle: &NuisanceBundle, trim: &TrimPolicy) -> f64 {
    let v = bundle.values(o.z, o.x);
    phi1_at(o.y, o.a, o.z, &v, trim)
}

/// `phi2(O; pi, delta, tau)`; reads only `pi`, `delta`, `tau`.
pub fn phi2(o: ObsRef<'_>, bundle: &NuisanceBundle, trim: &TrimPolicy) -> f64 {
    let v = bundle.values(o.z, o.x);
    phi2_at(o.y, o.a, o.z, &v, trim)
}

/// `phi3(O; mu, delta, rho)`; reads only `mu`, `delta`, `rho`.
pub fn phi3(o: ObsRef<'_>, bundle: &NuisanceBundle) -> f64 {
    let v = bundle.values(o.z, o.x);
    phi3_at(o.y, o.a, o.z, &v)
}

/// `phi_eff(O; pi, mu, delta, tau, rho)`.
pub fn phi_eff(o: ObsRef<'_>, bundle: &NuisanceBundle, trim: &TrimPolicy) -> f64 {
    let v = bundle.values(o.z, o.x);
    phi_eff_at(o.y, o.a, o.z, &v, trim)
}

/// Which moment function to average in [`plugin_average`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiKind {
    Phi1,
    PhiEff,
}

/// Empirical mean of the chosen moment function over a dataset. Trim
/// diagnostics accumulate on the supplied policy.
pub fn plugin_average(
    dataset: &Dataset,
    bundle: &NuisanceBundle,
    which: PhiKind,
    trim: &TrimPolicy,
) -> f64 {
    let values: Vec<f64> = (0..dataset.n())
        .map(|i| {
            let o = dataset.obs(i);
            match which {
                PhiKind::Phi1 => phi1(o, bundle, trim),
                PhiKind::PhiEff => phi_eff(o, bundle, trim),
            }
        })
        .collect();
    crate::numerics::kahan_mean(&values)
}
