use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not conform.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// Input value outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// A caller-side contract was violated (misaligned targets, consumed
    /// tape, mismatched temperatures).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Invalid configuration (bad key, bad value, impossible geometry).
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
