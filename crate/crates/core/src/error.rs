use std::path::PathBuf;

/// Errors surfaced by the watermarking library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("capacity error: {bits} bits requested but feature dimension is {feature_dim}")]
    Capacity { bits: usize, feature_dim: usize },

    #[error("parse error in field `{field}`: {reason}")]
    Parse { field: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown {kind} backend `{name}` (available: {})", available.join(", "))]
    Registry {
        kind: String,
        name: String,
        available: Vec<String>,
    },

    #[error("backend `{name}` does not support {capability}")]
    Capability { name: String, capability: String },

    #[error("optimization diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("training error: {0}")]
    Training(String),

    #[error("attack `{name}` failed: {source}")]
    Attack {
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn parse(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
