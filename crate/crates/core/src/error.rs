use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("solver failed: {0}")]
    SolverFailed(String),
    #[error("covariance matrix of (H, R) is singular for a pure mixture")]
    SingularSigma,
    #[error("observed covariance block is singular")]
    SingularBlock,
    #[error("target overlap not bracketed by the available levels")]
    NotBracketed,
    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),
    #[error("replica-symmetry-breaking depth mismatch: {0}")]
    KMismatch(String),
    #[error("capacity exceeded: {0}")]
    CapacityExceeded(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SolverFailed(_) => 2,
            Error::CapacityExceeded(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
