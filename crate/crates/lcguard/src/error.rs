//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A caller-supplied value is outside the operation's domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// An index (token id, class id, edge) is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Internal state does not permit the operation (e.g. missing gradient).
    #[error("invalid state: {0}")]
    State(String),

    /// A sequence or buffer limit was exceeded.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Experiment configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A loss or parameter became non-finite during training.
    #[error("numeric abort: {0}")]
    Numeric(String),

    /// Checkpoint/config fingerprints or format versions do not match.
    #[error("compatibility error: {0}")]
    Compat(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable process exit code for the CLI: 2 config, 3 numeric, 4 compat,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Numeric(_) => 3,
            Error::Compat(_) => 4,
            _ => 1,
        }
    }
}
