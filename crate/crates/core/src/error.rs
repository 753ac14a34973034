use thiserror::Error;

/// Errors raised by the solver toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CggmError {
    /// Shapes or indices do not fit together.
    #[error("structural error: {0}")]
    Structural(String),

    /// A configuration value is out of its valid range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data is unusable (non-finite entries, mismatched sample counts, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A matrix that must be positive definite is not.
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    /// An iterative method failed to reach its tolerance.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Derived quantities were computed for a different model than the one supplied.
    #[error("derived state is stale: it was computed for a different model")]
    StaleState,
}

pub type Result<T> = std::result::Result<T, CggmError>;

pub(crate) fn structural<T>(msg: impl Into<String>) -> Result<T> {
    Err(CggmError::Structural(msg.into()))
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(CggmError::Config(msg.into()))
}
