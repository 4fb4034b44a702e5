//! From-scratch machine learners (lasso, random forest, gradient boosting)
//! and the sequential nuisance-fitting pipeline.
//!
//! The pipeline regresses, in order: the instrument on covariates (`pi`),
//! the treatment on instrument and covariates (`mu`), the inverse-weighted
//! pseudo-outcome `phi1` on covariates (`delta`), the effect-residualized
//! outcome on instrument and covariates (`tau`), and the residual product
//! on covariates (`rho`). Pseudo-outcomes are winsorized at the 1st/99th
//! percentiles before the `delta` regression to keep denominator spikes
//! from destabilizing the tree learners; the count is reported.

mod boosting;
mod forest;
mod lasso;
mod tree;

pub use boosting::BoostModel;
pub use forest::ForestModel;
pub use lasso::LassoModel;

use crate::data::DataView;
use crate::error::Result;
use crate::influence::{phi1_at, NuisanceBundle, NuisanceValues, TrimPolicy, XFn, ZxFn};
use crate::numerics::child_seed;
use std::sync::Arc;

/// Response family of a learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Binary,
    Continuous,
}

/// Candidate learner families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Lasso,
    Forest,
    Boosting,
}

impl LearnerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LearnerKind::Lasso => "lasso",
            LearnerKind::Forest => "forest",
            LearnerKind::Boosting => "boosting",
        }
    }
}

impl std::str::FromStr for LearnerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "lasso" => Ok(LearnerKind::Lasso),
            "forest" | "rf" => Ok(LearnerKind::Forest),
            "boosting" | "gbm" => Ok(LearnerKind::Boosting),
            other => Err(format!("unknown learner kind {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoParams {
    pub grid_size: usize,
    pub cv_folds: usize,
    pub standardize: bool,
    pub lambda_min_ratio: f64,
}

impl Default for LassoParams {
    fn default() -> Self {
        LassoParams {
            grid_size: 50,
            cv_folds: 5,
            standardize: true,
            lambda_min_ratio: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features tried per split; defaults to `ceil(sqrt(q))`.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        // min_leaf 25: leaf frequencies from tiny leaves make the
        // instrument-arm contrast of the fitted propensity cross zero on a
        // few percent of points, and those sign flips dominate the
        // influence-function denominators downstream. Larger leaves keep
        // the contrast stable (and the pointwise error smaller) at the
        // sample sizes this crate targets.
        ForestParams {
            n_trees: 200,
            mtry: None,
            min_leaf: 25,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoostParams {
    pub n_trees: usize,
    pub depth: usize,
    pub shrinkage: f64,
    pub subsample: f64,
    pub min_leaf: usize,
    pub val_fraction: f64,
    pub patience: usize,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams {
            n_trees: 200,
            depth: 3,
            shrinkage: 0.05,
            subsample: 0.8,
            min_leaf: 5,
            val_fraction: 0.2,
            patience: 20,
        }
    }
}

/// Hyperparameters for all three learner families.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LearnerParams {
    pub lasso: LassoParams,
    pub forest: ForestParams,
    pub boosting: BoostParams,
}

/// Binary-family predictions are clamped into this range.
pub const PROB_CLAMP_LO: f64 = 0.005;
pub const PROB_CLAMP_HI: f64 = 0.995;

#[derive(Debug, Clone)]
enum Model {
    Lasso(LassoModel),
    Forest(ForestModel),
    Boost(BoostModel),
    Constant(f64),
}

/// Per-fit metadata (selected penalty, kept tree count).
#[derive(Debug, Clone, Default)]
pub struct TrainingMeta {
    pub selected_lambda: Option<f64>,
    pub tree_count: Option<usize>,
    pub in_sample_loss: f64,
}

/// A fitted learner exposing pointwise prediction.
#[derive(Debug, Clone)]
pub struct FittedLearner {
    pub kind: LearnerKind,
    pub family: Family,
    model: Model,
    pub meta: TrainingMeta,
}

impl FittedLearner {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let raw = match &self.model {
            Model::Lasso(m) => m.predict(x),
            Model::Forest(m) => m.predict(x),
            Model::Boost(m) => m.predict(x),
            Model::Constant(v) => *v,
        };
        match self.family {
            Family::Binary => raw.clamp(PROB_CLAMP_LO, PROB_CLAMP_HI),
            Family::Continuous => raw,
        }
    }

    fn constant(value: f64, kind: LearnerKind, family: Family) -> Self {
        FittedLearner {
            kind,
            family,
            model: Model::Constant(value),
            meta: TrainingMeta::default(),
        }
    }
}

const MIN_FIT_ROWS: usize = 10;

fn mean_of(y: &[f64]) -> f64 {
    crate::numerics::kahan_mean(y)
}

/// Cross-validated lasso fit.
pub fn fit_lasso(
    features: &[Vec<f64>],
    y: &[f64],
    family: Family,
    params: &LassoParams,
    seed: u64,
) -> FittedLearner {
    if y.len() < MIN_FIT_ROWS {
        return FittedLearner::constant(mean_of(y), LearnerKind::Lasso, family);
    }
    let model = LassoModel::fit_cv(features, y, family, params, seed);
    let meta = TrainingMeta {
        selected_lambda: Some(model.selected_lambda),
        tree_count: None,
        in_sample_loss: model.in_sample_loss,
    };
    FittedLearner {
        kind: LearnerKind::Lasso,
        family,
        model: Model::Lasso(model),
        meta,
    }
}

/// Lasso at a fixed penalty (no cross-validation); used by diagnostics and
/// oracle tests.
pub fn fit_lasso_at(features: &[Vec<f64>], y: &[f64], family: Family, lambda: f64) -> FittedLearner {
    let model = LassoModel::fit_at(features, y, family, lambda);
    let meta = TrainingMeta {
        selected_lambda: Some(lambda),
        tree_count: None,
        in_sample_loss: f64::NAN,
    };
    FittedLearner {
        kind: LearnerKind::Lasso,
        family,
        model: Model::Lasso(model),
        meta,
    }
}

/// Bagged regression / probability forest fit.
pub fn fit_forest(
    features: &[Vec<f64>],
    y: &[f64],
    family: Family,
    params: &ForestParams,
    seed: u64,
) -> FittedLearner {
    if y.len() < MIN_FIT_ROWS {
        return FittedLearner::constant(mean_of(y), LearnerKind::Forest, family);
    }
    let model = ForestModel::fit(features, y, params, seed);
    let meta = TrainingMeta {
        selected_lambda: None,
        tree_count: Some(model.n_trees()),
        in_sample_loss: f64::NAN,
    };
    FittedLearner {
        kind: LearnerKind::Forest,
        family,
        model: Model::Forest(model),
        meta,
    }
}

/// Gradient boosting fit with internal stage selection.
pub fn fit_boosting(
    features: &[Vec<f64>],
    y: &[f64],
    family: Family,
    params: &BoostParams,
    seed: u64,
) -> FittedLearner {
    if y.len() < MIN_FIT_ROWS {
        return FittedLearner::constant(mean_of(y), LearnerKind::Boosting, family);
    }
    let model = BoostModel::fit(features, y, family, params, seed);
    let meta = TrainingMeta {
        selected_lambda: None,
        tree_count: Some(model.n_trees()),
        in_sample_loss: model.val_loss,
    };
    FittedLearner {
        kind: LearnerKind::Boosting,
        family,
        model: Model::Boost(model),
        meta,
    }
}

/// Dispatch on the learner kind.
pub fn fit_learner(
    kind: LearnerKind,
    features: &[Vec<f64>],
    y: &[f64],
    family: Family,
    params: &LearnerParams,
    seed: u64,
) -> FittedLearner {
    match kind {
        LearnerKind::Lasso => fit_lasso(features, y, family, &params.lasso, seed),
        LearnerKind::Forest => fit_forest(features, y, family, &params.forest, seed),
        LearnerKind::Boosting => fit_boosting(features, y, family, &params.boosting, seed),
    }
}

/// Learner kinds for the five nuisance roles `(pi, mu, delta, tau, rho)`.
/// The first two are fit as binary-family learners, the rest continuous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NuisanceLearnerSet {
    pub pi: LearnerKind,
    pub mu: LearnerKind,
    pub delta: LearnerKind,
    pub tau: LearnerKind,
    pub rho: LearnerKind,
}

impl NuisanceLearnerSet {
    pub fn uniform(kind: LearnerKind) -> Self {
        NuisanceLearnerSet {
            pi: kind,
            mu: kind,
            delta: kind,
            tau: kind,
            rho: kind,
        }
    }
}

// ---------------------------------------------------------------------------
// Sequential pipeline

/// Materialized training arrays for the pipeline.
pub(crate) struct TrainArrays {
    pub x: Vec<Vec<f64>>,
    pub zx: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub a: Vec<f64>,
    pub z: Vec<u8>,
}

impl TrainArrays {
    pub fn from_view(view: &DataView<'_>) -> Self {
        TrainArrays {
            x: view.features(false),
            zx: view.features(true),
            y: view.y_vec(),
            a: view.a_vec(),
            z: view
                .indices()
                .iter()
                .map(|&i| view.dataset().z()[i])
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// Quantile of a sorted slice by linear interpolation.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Clamp values into their own `[lo_q, hi_q]` quantile range; returns the
/// number of values changed.
pub(crate) fn winsorize(values: &mut [f64], lo_q: f64, hi_q: f64) -> u64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = quantile_sorted(&sorted, lo_q);
    let hi = quantile_sorted(&sorted, hi_q);
    let mut changed = 0;
    for v in values.iter_mut() {
        if *v < lo {
            *v = lo;
            changed += 1;
        } else if *v > hi {
            *v = hi;
            changed += 1;
        }
    }
    changed
}

fn with_z(z: f64, x: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(1 + x.len());
    row.push(z);
    row.extend_from_slice(x);
    row
}

pub(crate) fn predict_x(model: &FittedLearner, xs: &[Vec<f64>]) -> Vec<f64> {
    xs.iter().map(|x| model.predict(x)).collect()
}

pub(crate) fn predict_zx(model: &FittedLearner, xs: &[Vec<f64>], z: f64) -> Vec<f64> {
    xs.iter().map(|x| model.predict(&with_z(z, x))).collect()
}

/// Fit the instrument propensity learner (binary, covariates only).
pub(crate) fn fit_pi_role(
    kind: LearnerKind,
    arrays: &TrainArrays,
    params: &LearnerParams,
    seed: u64,
) -> FittedLearner {
    let z: Vec<f64> = arrays.z.iter().map(|&v| f64::from(v)).collect();
    fit_learner(kind, &arrays.x, &z, Family::Binary, params, seed)
}

/// Fit the treatment propensity learner (binary, instrument prepended).
pub(crate) fn fit_mu_role(
    kind: LearnerKind,
    arrays: &TrainArrays,
    params: &LearnerParams,
    seed: u64,
) -> FittedLearner {
    fit_learner(kind, &arrays.zx, &arrays.a, Family::Binary, params, seed)
}

/// Pseudo-outcomes for the `delta` regression, winsorized; built from
/// upstream predicted values rather than models so oracle candidates can
/// share the path.
pub(crate) fn delta_pseudo_outcomes(
    arrays: &TrainArrays,
    pi1: &[f64],
    mu1: &[f64],
    mu0: &[f64],
    trim: &TrimPolicy,
) -> (Vec<f64>, u64) {
    let mut pseudo: Vec<f64> = (0..arrays.n())
        .map(|i| {
            let v = NuisanceValues {
                pi1: pi1[i],
                mu1: mu1[i],
                mu0: mu0[i],
                delta: 0.0,
                tau: 0.0,
                rho: 0.0,
            };
            phi1_at(arrays.y[i], arrays.a[i] as u8, arrays.z[i], &v, trim)
        })
        .collect();
    let winsorized = winsorize(&mut pseudo, 0.01, 0.99);
    (pseudo, winsorized)
}

pub(crate) fn fit_delta_role(
    kind: LearnerKind,
    arrays: &TrainArrays,
    pseudo: &[f64],
    params: &LearnerParams,
    seed: u64,
) -> FittedLearner {
    fit_learner(kind, &arrays.x, pseudo, Family::Continuous, params, seed)
}

pub(crate) fn fit_tau_role(
    kind: LearnerKind,
    arrays: &TrainArrays,
    delta_vals: &[f64],
    params: &LearnerParams,
    seed: u64,
) -> FittedLearner {
    let resp: Vec<f64> = (0..arrays.n())
        .map(|i| arrays.y[i] - delta_vals[i] * arrays.a[i])
        .collect();
    fit_learner(kind, &arrays.zx, &resp, Family::Continuous, params, seed)
}

pub(crate) fn fit_rho_role(
    kind: LearnerKind,
    arrays: &TrainArrays,
    mu_obs_vals: &[f64],
    delta_vals: &[f64],
    params: &LearnerParams,
    seed: u64,
) -> FittedLearner {
    let resp: Vec<f64> = (0..arrays.n())
        .map(|i| (arrays.a[i] - mu_obs_vals[i]) * (arrays.y[i] - delta_vals[i] * arrays.a[i]))
        .collect();
    fit_learner(kind, &arrays.x, &resp, Family::Continuous, params, seed)
}

/// Winsorization and fit audit trail of a pipeline run.
#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineDiagnostics {
    pub winsorized: u64,
}

fn learner_xfn(model: FittedLearner) -> XFn {
    Arc::new(move |x: &[f64]| model.predict(x))
}

fn learner_zxfn(model: FittedLearner) -> ZxFn {
    Arc::new(move |z: u8, x: &[f64]| model.predict(&with_z(f64::from(z), x)))
}

/// Fit the five nuisance learners sequentially on a training view and
/// return them as an evaluator bundle.
pub fn fit_nuisance_sequence(
    train: &DataView<'_>,
    kinds: &NuisanceLearnerSet,
    trim: &TrimPolicy,
    params: &LearnerParams,
    seed: u64,
) -> Result<(NuisanceBundle, PipelineDiagnostics)> {
    let arrays = TrainArrays::from_view(train);

    let pi = fit_pi_role(kinds.pi, &arrays, params, child_seed(seed, 1));
    let mu = fit_mu_role(kinds.mu, &arrays, params, child_seed(seed, 2));

    let pi1 = predict_x(&pi, &arrays.x);
    let mu1 = predict_zx(&mu, &arrays.x, 1.0);
    let mu0 = predict_zx(&mu, &arrays.x, 0.0);
    let (pseudo, winsorized) = delta_pseudo_outcomes(&arrays, &pi1, &mu1, &mu0, trim);
    let delta = fit_delta_role(kinds.delta, &arrays, &pseudo, params, child_seed(seed, 3));

    let delta_vals = predict_x(&delta, &arrays.x);
    let tau = fit_tau_role(kinds.tau, &arrays, &delta_vals, params, child_seed(seed, 4));

    let mu_obs: Vec<f64> = (0..arrays.n())
        .map(|i| if arrays.z[i] == 1 { mu1[i] } else { mu0[i] })
        .collect();
    let rho = fit_rho_role(
        kinds.rho,
        &arrays,
        &mu_obs,
        &delta_vals,
        params,
        child_seed(seed, 5),
    );

    let bundle = NuisanceBundle::new(
        learner_xfn(pi),
        learner_zxfn(mu),
        learner_xfn(delta),
        learner_zxfn(tau),
        learner_xfn(rho),
    );
    Ok((bundle, PipelineDiagnostics { winsorized }))
}
