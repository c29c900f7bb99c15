use thiserror::Error;

/// Errors raised anywhere in the training stack.
#[derive(Debug, Error)]
pub enum CpscError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index out of range: {index} (len {len})")]
    Index { index: usize, len: usize },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stale forward cache: cached at version {cached}, model at {current}")]
    Consistency { cached: u64, current: u64 },
    #[error("statistics error: {0}")]
    Statistics(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CpscError>;

pub(crate) fn dim_err(msg: impl Into<String>) -> CpscError {
    CpscError::Dimension(msg.into())
}
