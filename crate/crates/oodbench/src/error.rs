//! Crate-wide error type.

use thiserror::Error;

/// All failure modes surfaced by the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input vector/matrix shapes do not match the expected layout.
    #[error("shape error: {0}")]
    Shape(String),

    /// A numeric contract was violated (non-finite values, NaN loss, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API contract between components was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A dataset is malformed (empty class, label out of range, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A text input failed to parse; carries the 1-based line number.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Fitting a measure's state failed (degenerate class, ...).
    #[error("fit error: {0}")]
    Fit(String),

    /// A measure was requested for a model that cannot provide it.
    #[error("measure incompatible: {0}")]
    MeasureIncompatible(String),

    /// Model selection could not be performed.
    #[error("selection error: {0}")]
    Selection(String),

    /// Configuration file or override problem.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint/record file is malformed or of an unsupported version.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
