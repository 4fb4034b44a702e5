//! Estimate reports shared by every estimator.

use crate::influence::TrimCounts;

/// Identifies which estimator produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorId {
    Delta1,
    Genius,
    GeniusEff,
    Mr,
    Ols,
    Tsiv,
    Dml,
    SmlDagger,
    SmlDdagger,
}

impl EstimatorId {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorId::Delta1 => "delta1",
            EstimatorId::Genius => "genius",
            EstimatorId::GeniusEff => "genius_eff",
            EstimatorId::Mr => "mr",
            EstimatorId::Ols => "ols",
            EstimatorId::Tsiv => "tsiv",
            EstimatorId::Dml => "dml",
            EstimatorId::SmlDagger => "sml_dagger",
            EstimatorId::SmlDdagger => "sml_ddagger",
        }
    }
}

/// Direct-effect coefficient (the instrument coefficient of the `tau`
/// working model) with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DirectEffect {
    pub coefficient: f64,
    pub std_error: f64,
}

/// Fit and evaluation diagnostics carried on a report.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct Diagnostics {
    pub solver_iterations: usize,
    pub converged: bool,
    pub separation: bool,
    /// Stage-2 restarts that were needed before convergence.
    pub retries: usize,
    pub trim: TrimCounts,
    /// Pseudo-outcome values winsorized inside learner pipelines.
    pub winsorized: u64,
    /// Set on SML reports: the standard error ignores selection.
    pub post_selection: bool,
}

/// Point estimate with a normal-approximation 95% interval.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EstimateReport {
    pub estimator_id: EstimatorId,
    pub estimate: f64,
    pub std_error: f64,
    pub ci95: (f64, f64),
    pub aux: Option<DirectEffect>,
    pub diagnostics: Diagnostics,
}

pub const CI_MULTIPLIER: f64 = 1.96;

impl EstimateReport {
    pub fn new(estimator_id: EstimatorId, estimate: f64, std_error: f64) -> Self {
        let half = CI_MULTIPLIER * std_error;
        EstimateReport {
            estimator_id,
            estimate,
            std_error,
            ci95: (estimate - half, estimate + half),
            aux: None,
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn with_aux(mut self, aux: DirectEffect) -> Self {
        self.aux = Some(aux);
        self
    }

    pub fn with_diagnostics(mut self, diagnostics: Diagnostics) -> Self {
        self.diagnostics = diagnostics;
        self
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci95.0 <= value && value <= self.ci95.1
    }
}
