use thiserror::Error;

/// Errors surfaced by the belief engine, environments, and planners.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a precondition (mismatched dimensions, empty
    /// action set, nonpositive tolerance, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A floating-point computation failed (factorization breakdown,
    /// non-finite intermediate). Carries condition diagnostics.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The request is structurally sound but exceeds a configured size cap.
    #[error("capability exceeded: {0}")]
    Capability(String),

    /// A data or config file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn capability(msg: impl Into<String>) -> Self {
        Error::Capability(msg.into())
    }
}
