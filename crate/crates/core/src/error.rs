use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: zero-extent input {shape:?}")]
    EmptyExtent { op: &'static str, shape: Vec<usize> },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("degenerate scale: warp of {src_w}x{src_h} by {element} yields {dst_w}x{dst_h} (minimum {min} px)")]
    DegenerateScale {
        element: String,
        src_w: usize,
        src_h: usize,
        dst_w: usize,
        dst_h: usize,
        min: usize,
    },

    #[error("image {w}x{h} is smaller than the required {min_w}x{min_h}")]
    ImageTooSmall {
        w: usize,
        h: usize,
        min_w: usize,
        min_h: usize,
    },

    #[error("singular homography (|det| = {0:e})")]
    SingularHomography(f64),

    #[error("point ({x}, {y}) lies outside the {w}x{h} image")]
    PointOutOfBounds { x: f64, y: f64, w: usize, h: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("could not find {needed} valid correspondences after {attempts} attempts")]
    InsufficientOverlap { needed: usize, attempts: usize },

    #[error("non-finite loss at step {step}\n{dump}")]
    NonFiniteLoss { step: usize, dump: String },

    #[error("{path}: corrupt file at byte offset {offset}: {reason}")]
    Corrupt {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
