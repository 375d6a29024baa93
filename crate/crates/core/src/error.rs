use std::io;
use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// Malformed file container (bad magic, version, truncated payload).
    #[error("format error: {0}")]
    Format(String),

    /// Input data is structurally valid but unusable (too few frames, NaN payload, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Caller passed an argument outside the documented domain.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Text file failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A model or problem instance is degenerate (single speaker, empty cluster, ...).
    #[error("degeneracy error: {0}")]
    Degeneracy(String),

    /// Numerical failure that should be impossible on valid input.
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::Degeneracy(_) => 1,
            Error::Io(_) | Error::Format(_) | Error::Data(_) | Error::Parse { .. } => 2,
            Error::Numeric(_) => 3,
        }
    }
}
