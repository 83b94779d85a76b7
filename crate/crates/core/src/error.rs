use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infimum certification failed: {0}")]
    CertificationFailed(String),

    #[error("oracle has no finite noise support; use the analytic variance instead")]
    NoFiniteSupport,

    #[error("no relaxed-growth violation found: {0}")]
    RefutationFailed(String),

    #[error("BGD estimation failed: {0}")]
    EstimationFailed(String),

    #[error("point is not stationary: |grad f| = {grad_norm:e}")]
    NotStationary { grad_norm: f64 },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("iterate diverged at round {round}")]
    Diverged { round: usize },

    #[error("all {0} trials diverged")]
    AllTrialsDiverged(usize),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
