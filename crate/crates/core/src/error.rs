use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("manifest {0} is empty")]
    EmptyManifest(PathBuf),

    #[error("duplicate image path in manifest: {0}")]
    DuplicateImage(String),

    #[error("unsupported dataset for split rules: {0}")]
    UnknownDataset(String),

    /// Otsu on an image with a single intensity level.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A feature dimension with (near) zero norm or zero spread over the batch.
    /// This is the collapse signal and is never patched silently.
    #[error("degenerate dimension {dim}: {reason}")]
    DegenerateDimension { dim: usize, reason: &'static str },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("writers missing from the training split: {}", .0.join(", "))]
    MissingClasses(Vec<String>),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
