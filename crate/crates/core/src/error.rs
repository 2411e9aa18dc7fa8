use thiserror::Error;

/// Library-wide error type. Variants map onto process exit codes at the CLI
/// boundary: config/usage problems exit 2, data-format problems exit 3,
/// numeric failures exit 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration value or combination.
    #[error("invalid config: {0}")]
    Config(String),

    /// An internal precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed or truncated file contents.
    #[error("data format: {0}")]
    Format(String),

    /// Lookup of an unknown target variable name.
    #[error("unknown target variable: {0}")]
    UnknownVariable(String),

    /// Non-finite values or other numeric breakdown.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Process exit code this error maps to at the CLI boundary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Config(_) | Error::Contract(_) | Error::UnknownVariable(_) => 2,
            Error::Format(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
