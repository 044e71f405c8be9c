use thiserror::Error;

/// Errors raised by partition, basis, quadratic-variation and synthesis routines.
#[derive(Debug, Error)]
pub enum QvError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("invalid coarsening: {0}")]
    Coarsening(String),
    #[error("level error: requested level {requested}, available {available}")]
    Level { requested: usize, available: usize },
    #[error("truncation error: {0}")]
    Truncation(String),
    #[error("unknown {what}: {name}")]
    Unknown { what: &'static str, name: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, QvError>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(QvError::Argument(msg.into()))
}
