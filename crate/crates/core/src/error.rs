use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions, invalid hyper-parameters or a malformed config.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was called in a state where it is not allowed.
    #[error("usage error: {0}")]
    Usage(String),
    /// A block memory was sampled before it was seeded.
    #[error("cold start: memory of block {block} is empty")]
    ColdStart { block: usize },
    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    /// A gradient check hit a non-finite gradient.
    #[error("non-finite gradient in input {input}, element {index}")]
    NonFiniteGradient { input: usize, index: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed data: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn usage_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}
