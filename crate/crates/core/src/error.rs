//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants map onto the CLI exit codes: config/shape errors exit with 2,
/// data errors with 3, numerical and parameter errors with 4.
#[derive(Debug, Error)]
pub enum FavarError {
    /// Invalid run configuration or dimension mismatch.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// A linear-algebra or sampling step lost numerical validity.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A sampler was called outside its valid parameter region.
    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl FavarError {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            FavarError::Config(_) => 2,
            FavarError::Data(_) | FavarError::Io(_) => 3,
            FavarError::Numerical(_) | FavarError::Parameter(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, FavarError>;
