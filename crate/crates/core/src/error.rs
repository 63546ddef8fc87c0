use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),

    #[error("invalid {field}: {detail}")]
    Invalid { field: &'static str, detail: String },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    /// A masked reduction was asked for over a region with zero weight.
    #[error("{0}")]
    EmptyRegion(&'static str),

    #[error("manifest entry {index}: {detail}")]
    Manifest { index: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss {
        step: usize,
        last_finite: Option<Box<crate::losses::LossReport>>,
    },
}

impl Error {
    pub fn invalid(field: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            field,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
