use thiserror::Error;

/// Errors produced anywhere in the MIRAM pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("corrupted data: {0}")]
    Corruption(String),

    #[error("unsupported checkpoint version {0} (expected 1)")]
    Version(u32),

    #[error("data error: {0}")]
    Data(String),

    #[error("training failed at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn param_err(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}
