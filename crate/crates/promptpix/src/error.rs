//! Crate-wide error type.
//!
//! Variants map onto the CLI's structured exit codes: validation and
//! configuration problems exit 2, I/O problems exit 3, numerical failures
//! exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported task `{0}`")]
    UnsupportedTask(String),

    #[error("scene pool too small: need at least {need}, have {have}")]
    InsufficientPool { need: usize, have: usize },

    #[error("evaluation split contaminated: {0}")]
    Contamination(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Adapter for `map_err` on I/O results: `res.map_err(Error::io("reading manifest"))`.
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| Error::Io { context, source }
    }

    /// Structured process exit code for the CLI: 2 validation, 3 I/O, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Config(_)
            | Error::UnsupportedTask(_)
            | Error::InsufficientPool { .. }
            | Error::Contamination(_)
            | Error::Checkpoint(_) => 2,
            Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
        }
    }
}
