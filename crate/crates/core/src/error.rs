//! Error taxonomy shared across the crate.
//!
//! Variants map onto the CLI exit codes: config errors exit 1, data and
//! format errors exit 2, numeric errors exit 3.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DcaError>;

#[derive(Debug, Error)]
pub enum DcaError {
    /// Invalid configuration (bad widths, n < 2, unknown keys, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Tensor or parameter shape mismatch.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid runtime data (labels out of range, empty score sets, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed file contents (bad magic, CRC mismatch, truncation).
    #[error("format error: {0}")]
    Format(String),

    /// NaN or infinity produced where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operation invoked in the wrong order (backward before forward).
    #[error("state error: {0}")]
    State(String),

    /// Proposal incompatible with the bank it is applied to.
    #[error("proposal error: {0}")]
    Proposal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl DcaError {
    /// CLI process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            DcaError::Config(_) => 1,
            DcaError::Numeric(_) => 3,
            _ => 2,
        }
    }
}
