use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("problem too large: {0}")]
    Scale(String),

    /// Malformed binary file. `offset` is the byte position where decoding failed.
    #[error("malformed {what} at byte offset {offset}: {msg}")]
    Format {
        what: &'static str,
        offset: usize,
        msg: String,
    },

    #[error("unsupported {what} version {found} (this build reads version {expected})")]
    Version {
        what: &'static str,
        found: u16,
        expected: u16,
    },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
