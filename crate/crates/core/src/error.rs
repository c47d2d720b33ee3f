use thiserror::Error;

/// Errors raised across the avatar engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("state error: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("shape mismatch in group `{group}`: expected {expected}, found {found}")]
    ShapeMismatch {
        group: String,
        expected: String,
        found: String,
    },
    #[error("non-finite values in parameter group `{group}` at step {step}")]
    NonFinite { group: String, step: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
