use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Two shapes that must agree do not.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A shape is malformed for the requested operation.
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    /// `backward` was called on a tensor with more than one element.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    /// JPEG quality outside `[1, 100]`.
    #[error("JPEG quality must lie in [1, 100], got {0}")]
    InvalidQuality(u32),

    /// Input spatial size is not a multiple of the encoder's total stride.
    #[error("input size {height}x{width} is not divisible by {multiple}; pad the image to a multiple of {multiple}")]
    IndivisibleInput {
        height: usize,
        width: usize,
        multiple: usize,
    },

    /// A caller supplied an argument outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A training or evaluation run could not proceed.
    #[error("training aborted: {0}")]
    Training(String),

    /// A checkpoint file is malformed or incompatible.
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
