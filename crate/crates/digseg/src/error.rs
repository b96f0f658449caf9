//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// A numeric argument violated its documented range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A configuration is internally inconsistent or unusable.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Encoding/decoding through the latent codec failed.
    #[error("codec error: {0}")]
    Codec(String),

    /// A model was fed inputs it cannot consume.
    #[error("model error: {0}")]
    Model(String),

    /// A class name is not part of the active vocabulary.
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// Per-class mask maps could not be merged.
    #[error("aggregation error: {0}")]
    Aggregation(String),

    /// A checkpoint file is missing, truncated or of the wrong version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged; carries a diagnostic snapshot of the offending step.
    #[error("training aborted at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    /// An evaluation/ablation run is missing a required input.
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
