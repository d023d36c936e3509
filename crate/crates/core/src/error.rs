use thiserror::Error;

#[derive(Debug, Error)]
pub enum TbnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TbnError> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::TbnError::Shape(format!($($arg)*)) };
}
macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::TbnError::InvalidArgument(format!($($arg)*)) };
}
pub(crate) use {invalid, shape_err};
