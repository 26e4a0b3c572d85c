use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate rating scale: every observed rating equals {0}, divisor would be zero")]
    ZeroDivisor(f64),

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error(
        "truncated SVD did not converge within {iterations} iterations \
         (worst residual {worst_residual:.3e}, target {target:.3e})"
    )]
    NoConvergence {
        iterations: usize,
        residuals: Vec<f64>,
        worst_residual: f64,
        target: f64,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("size guard: {0}")]
    SizeGuard(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("expansion incomplete: {0}")]
    Incomplete(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid_matrix(msg: impl Into<String>) -> Self {
        Error::InvalidMatrix(msg.into())
    }

    pub(crate) fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
