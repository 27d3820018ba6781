use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Each variant maps onto one CLI exit class via [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("no solution: {0}")]
    NoSolution(String),

    /// The model violates a structural precondition of a verdict
    /// (augmented width, rank-deficient transform, ...).
    #[error("verdict inapplicable: {0}")]
    Inapplicable(String),

    #[error("property violation: {0}")]
    PropertyViolation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit status used by the `resnetlab` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::InvalidArgument(_) | Error::Dimension(_) => 2,
            Error::Json(_) | Error::Io(_) | Error::Csv(_) => 2,
            Error::PropertyViolation(_) | Error::Inapplicable(_) => 3,
            Error::NonFinite(_) | Error::Numerical(_) => 4,
            Error::InvalidState(_) | Error::NoSolution(_) => 4,
        }
    }
}
