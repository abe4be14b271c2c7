use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A feature pyramid is missing a level the operation needs.
    #[error("feature pyramid has no level at scale 1/{0}")]
    MissingScale(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("no valid flow pixels; sample cannot supervise the flow branch")]
    NoValidPixels,

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("flow weight lambda must be positive, got {0}")]
    NonPositiveLambda(f64),

    #[error(transparent)]
    Flo(#[from] FloError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("missing annotation {path}")]
    MissingAnnotation { path: PathBuf },

    #[error("training diverged in {phase} at step {step}: {reason}")]
    Diverged {
        phase: String,
        step: usize,
        reason: String,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures reading a Middlebury `.flo` file.
#[derive(Debug, Error, PartialEq)]
pub enum FloError {
    #[error("bad .flo magic {0} (expected 202021.25)")]
    BadMagic(f32),

    #[error("truncated .flo payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("non-positive .flo dimensions {width}x{height}")]
    NonPositiveDimensions { width: i32, height: i32 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
