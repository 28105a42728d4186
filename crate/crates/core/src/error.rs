use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate batch statistics: {0} element(s) per channel, need at least 2")]
    DegenerateStatistics(usize),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("invalid network spec: {0}")]
    Spec(String),

    #[error("sampler diverged at step {step} (max |value| = {max_abs})")]
    SamplerDivergence { step: usize, max_abs: f64 },

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("index {index} out of range for {len} item(s)")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("model is not trained")]
    Untrained,

    #[error("image error in {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
