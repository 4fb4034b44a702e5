//! Estimation of the population average treatment effect (ATE) when the
//! instrumental variable is invalid, i.e. may have a direct effect on the
//! outcome that is not mediated by the treatment.
//!
//! Identification leverages heteroscedasticity of the treatment across
//! instrument arms: writing `mu(z, x) = P(A = 1 | Z = z, X = x)` and
//! `sigma2(z, x) = mu(1 - mu)`, the ATE is the mean of the conditional
//! effect `delta(x)`, which is recovered from instrument-arm contrasts of
//! `(A - mu)Y` scaled by `sigma2(1, x) - sigma2(0, x)`.
//!
//! The crate provides:
//!
//! * pointwise influence-function evaluation ([`influence`]) with a shared
//!   nuisance-bundle abstraction used by every estimator,
//! * two-step parametric estimation with sandwich standard errors and
//!   multiply robust / G-estimation style comparators ([`mr`]),
//! * from-scratch machine learners (lasso, random forest, gradient
//!   boosting) and the sequential nuisance-fitting pipeline ([`learners`]),
//! * cross-fitted debiased machine learning ([`dml`]),
//! * selective machine learning over candidate learner tuples via
//!   cross-validated minimax pseudo-risks ([`sml`]),
//! * a simulation data-generating process with misspecification scenarios
//!   and a Monte Carlo harness ([`sim`]).
//!
//! Data-parallel inner loops (Monte Carlo replications, tree fitting,
//! cross-fitting folds, candidate caches) run on rayon when the default
//! `parallel` feature is enabled and fall back to sequential iteration
//! otherwise. All reductions are performed in a fixed order so results are
//! bit-identical across thread counts and with the feature disabled.

pub mod data;
pub mod dml;
pub mod error;
pub mod influence;
pub mod learners;
pub mod mr;
pub mod numerics;
pub mod report;
pub mod sim;
pub mod sml;

pub(crate) mod par;

pub use data::{ColumnSchema, ColumnTransform, CovariateSpec, Dataset, Observation};
pub use error::IvmrError;
pub use influence::{NuisanceBundle, TrimPolicy};
pub use report::{EstimateReport, EstimatorId};
