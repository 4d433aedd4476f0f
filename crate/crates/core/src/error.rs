use thiserror::Error;

/// Errors raised across the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or parameter combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value fell outside the domain an operation is defined on.
    #[error("domain error at row {row}, column {col}: value {value} outside [-1, 1]")]
    Domain { row: usize, col: usize, value: f64 },

    /// Scalar domain violation without a matrix location.
    #[error("domain error: {0}")]
    ScalarDomain(String),

    /// Operand shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Input data that makes the requested quantity undefined.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Rank deficiency detected during a factorization.
    #[error("rank deficient matrix: pivot {pivot} has magnitude {magnitude:e}")]
    RankDeficient { pivot: usize, magnitude: f64 },

    /// Iterative solver failed to certify convergence.
    #[error("no convergence after {iterations} iterations (residual measure {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    /// Non-finite values appeared during optimization.
    #[error("divergence: {0}")]
    Divergence(String),

    /// Generic numerical failure (non-SPD matrix, failed eigensolve, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True when the error stems from user-supplied configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Json(_))
    }
}
