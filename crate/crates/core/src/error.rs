use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("signal is empty")]
    EmptySignal,
    #[error("signal is silent: {0}")]
    SilentSignal(String),
    #[error("signal contains non-finite samples")]
    NonFiniteSample,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("manifest has no usable {0} entries")]
    EmptyManifest(&'static str),
    #[error("unsupported number of outputs: {0} (expected 2 or 3)")]
    UnsupportedOutputs(usize),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),
    #[error("backward called without a matching forward context")]
    MissingForwardContext,
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("validation example {0} is not a clean-target example")]
    WrongKind(usize),
    #[error("training diverged at step {step}: loss {loss}")]
    DivergedLoss { step: u64, loss: f64 },
    #[error("enhanced signal is silent")]
    SilentEnhanced,
    #[error("noisy signal is silent")]
    SilentNoisy,
    #[error("reference signal is silent")]
    SilentReference,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
