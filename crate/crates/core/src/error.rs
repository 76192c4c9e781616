//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shape mismatch; the message names the offending layer.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid argument (bad label, empty dataset, out-of-range index, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed file contents (IDX, CSV, checkpoint).
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    /// Non-finite value produced during training; names the offending term.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Configuration file problems (missing file, unknown keys, invalid values).
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
