use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layout mismatch at {root}: {reason}")]
    LayoutMismatch { root: PathBuf, reason: String },

    #[error("record `{id}`: {reason}")]
    Record { id: String, reason: String },

    #[error("degenerate depth map: max equals min ({value})")]
    DegenerateDepth { value: f32 },

    #[error("sample `{id}` has no ground-truth depth map")]
    MissingDepth { id: String },

    #[error("depth pool is empty")]
    EmptyPool,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("config mismatch on `{key}`: checkpoint has {found}, config expects {expected}")]
    ConfigMismatch {
        key: String,
        expected: String,
        found: String,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("missing checkpoint {path} (required by the {phase} phase)")]
    MissingCheckpoint { path: PathBuf, phase: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
