//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The variants map onto the CLI exit codes: config errors exit 2, data and
/// format errors exit 3, numeric/runtime errors exit 4, privacy-budget
/// aborts exit 5.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset-level validation failure (labels out of range, empty splits, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed file content, with the byte offset of the first problem.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Shape mismatch in a numeric operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values or other numeric failures.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Noise calibration could not reach the target within the search bracket.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// The privacy budget would be exceeded by the next step.
    #[error("privacy budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Data(format!("csv: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io(_) => 3,
            Error::Shape(_) | Error::Numeric(_) | Error::Calibration(_) => 4,
            Error::BudgetExceeded(_) => 5,
        }
    }
}
