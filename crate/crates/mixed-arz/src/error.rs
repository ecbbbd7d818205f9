//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// `Config` and `Validation` indicate bad inputs (CLI exit code 2);
/// `Numerics` indicates a solver or stability failure (exit code 3).
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed configuration file.
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    /// Input rejected by a precondition or domain check.
    #[error("{0}")]
    Validation(String),

    /// Numerical failure: divergence, non-convergence, loss of hyperbolicity.
    #[error("{0}")]
    Numerics(String),

    /// File system failure while reading configs or writing reports.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerics(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
