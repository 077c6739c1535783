use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Tensor extents that do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Invalid layer, head or assignment configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed user input (boxes, probabilities, scenes).
    #[error("input error: {0}")]
    Input(String),
    /// A non-finite value showed up where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
