//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by data validation, numerical kernels and estimators.
#[derive(Debug, Error)]
pub enum IvmrError {
    #[error("treatment indicator is not 0/1 at row {row}: {value}")]
    NonBinaryTreatment { row: usize, value: f64 },
    #[error("instrument indicator is not 0/1 at row {row}: {value}")]
    NonBinaryInstrument { row: usize, value: f64 },
    #[error("non-finite value at row {row}, column {column}")]
    NonFiniteValue { row: usize, column: usize },
    #[error("degenerate instrument: all observations share z = {value}")]
    DegenerateInstrument { value: u8 },
    #[error("covariate index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("row {row} has length {got}, expected {expected}")]
    RowLength { row: usize, got: usize, expected: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("covariate spec declares more than one intercept column")]
    DuplicateIntercept,

    #[error("separation detected in logistic fit (coefficient max-norm {norm:.2} > 30)")]
    SeparationDetected { norm: f64 },
    #[error("weighted least-squares system is singular")]
    SingularWeightedSystem,
    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },
    #[error("moment solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular Jacobian in moment solver")]
    SingularJacobian,
    #[error("non-finite evaluation in numeric differentiation")]
    NonFiniteEvaluation,
    #[error("degenerate truncation interval: [{lo}, {hi}]")]
    DegenerateInterval { lo: f64, hi: f64 },

    #[error("cross-fitting needs at least {need} observations, got {got}")]
    TooFewObservations { need: usize, got: usize },
    #[error("nuisance bundle failed to fit on fold {fold}: {source}")]
    FoldFitFailure {
        fold: usize,
        #[source]
        source: Box<IvmrError>,
    },
    #[error("candidate learner failed for role {role} index {index} on split {split}: {source}")]
    CandidateFitFailure {
        role: &'static str,
        index: usize,
        split: usize,
        #[source]
        source: Box<IvmrError>,
    },
    #[error("tuple enumeration {count} exceeds the configured cap {cap}")]
    TupleCapExceeded { count: usize, cap: usize },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, IvmrError>;
