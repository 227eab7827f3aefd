use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Model or run configuration rejected during validation.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("correlation matrix is not positive semidefinite (pivot {pivot} at row {row})")]
    NotPositiveSemidefinite { row: usize, pivot: f64 },

    #[error("coordinate index {index} out of range for dimension {dim}")]
    Coordinate { index: usize, dim: usize },

    #[error("tail index does not exist for coordinate {coord}: {reason}")]
    NoTailIndex { coord: usize, reason: String },

    #[error("coordinate {coord} is not contractive (E log|A| upper bound {upper})")]
    NotContractive { coord: usize, upper: f64 },

    #[error("divergence detected in chain {chain} at step {step}")]
    Divergence { chain: usize, step: usize },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("ambiguous partition for pair ({i}, {j}): {reason}")]
    AmbiguousPartition { i: usize, j: usize, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("weight function too heavy: {0}")]
    TauTooHeavy(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("pool format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by the input rather than by estimation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::NotPositiveSemidefinite { .. } | Error::Coordinate { .. } | Error::Json(_)
        )
    }
}
