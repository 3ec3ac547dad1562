use thiserror::Error;

use crate::trainer::TrainTrace;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("degenerate direction: {0}")]
    DegenerateDirection(&'static str),

    #[error("orthogonal complement empty: dimension 1 admits no direction at cosine {0}")]
    EmptyComplement(f64),

    #[error("no performance delta: alpha_c ({alpha_c}) must exceed alpha_r ({alpha_r})")]
    NoPerformanceDelta { alpha_c: f64, alpha_r: f64 },

    #[error("C1 violated: kappa = {0} is not positive")]
    C1Violated(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("f'(0) identities disagree: {projected} vs {decomposed}")]
    IdentityMismatch { projected: f64, decomposed: f64 },

    #[error("divergence: non-finite iterate at step {step}")]
    Divergence { step: u64, trace: Box<TrainTrace> },

    #[error("mismatched traces: {0}")]
    TraceMismatch(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

pub(crate) fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidArgument(msg.into())
}
