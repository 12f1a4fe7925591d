use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// The negated Hessian stayed indefinite after the largest diagonal jitter.
    #[error(
        "negative Hessian is not positive definite after jitter {jitter:e}; \
         smallest eigenvalue is {min_eigenvalue:e}"
    )]
    NotPositiveDefinite { min_eigenvalue: f64, jitter: f64 },

    /// `|1 + v' C^-1 u|` collapsed, so `C + u v'` is (numerically) singular.
    #[error("low-rank covariance root is singular (|1 + v'C^-1 u| = {0:e}); re-initialise U and V")]
    SingularRoot(f64),

    #[error("optimisation failed: {0}")]
    Optimisation(String),

    #[error("hyperparameter search failed for every candidate: {0}")]
    NoViableCandidate(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Data(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::NonFinite(_)
            | Error::NotPositiveDefinite { .. }
            | Error::SingularRoot(_)
            | Error::Optimisation(_)
            | Error::NoViableCandidate(_) => 4,
        }
    }
}
