use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("gradient check failed: {0}")]
    Check(String),
    #[error("world generation failed: {0}")]
    Generation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
