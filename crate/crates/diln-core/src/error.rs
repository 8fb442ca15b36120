//! Error type shared across the crate.

use thiserror::Error;

/// Errors surfaced by the pipeline. The variants map onto the CLI exit-code
/// classes: `Data`/`Config`/`Io` are data errors, `Shape`/`Numeric` are
/// numeric failures.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Malformed, missing or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration (bad key, unparsable value, contradictory setup).
    #[error("config error: {0}")]
    Config(String),

    /// Tensor or parameter dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values, divergence or a failed numeric check.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
