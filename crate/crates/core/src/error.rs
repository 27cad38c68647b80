use thiserror::Error;

/// Errors raised by the matching pipeline and its kernels.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("relative pose unavailable: {0}")]
    PoseUnavailable(String),
    #[error("no valid source cells to refine against")]
    NoRefinement,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
