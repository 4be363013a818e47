//! Error taxonomy shared by all modules.

use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

/// Failure categories. The CLI maps these onto process exit codes, so the
/// distinction between configuration, validation, and numeric failures is
/// part of the public contract.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Shape or axis mismatch in a tensor operation.
    Dimension(String),
    /// Invalid configuration value (temperature, head count, ...).
    Config(String),
    /// An operation received an empty sequence or corpus.
    EmptyInput(String),
    /// Mathematically degenerate input (zero vector, constant ranks).
    DegenerateInput(String),
    /// An API precondition was violated by the caller.
    Contract(String),
    /// Data failed schema or consistency validation.
    Validation(String),
    /// A NaN or infinity was produced or detected.
    NonFinite(String),
}

impl Error {
    pub fn message(&self) -> &str {
        match self {
            Error::Dimension(m)
            | Error::Config(m)
            | Error::EmptyInput(m)
            | Error::DegenerateInput(m)
            | Error::Contract(m)
            | Error::Validation(m)
            | Error::NonFinite(m) => m,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::EmptyInput(_) => "empty-input",
            Error::DegenerateInput(_) => "degenerate-input",
            Error::Contract(_) => "contract",
            Error::Validation(_) => "validation",
            Error::NonFinite(_) => "non-finite",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

impl core::error::Error for Error {}
