//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Numerically degenerate input (zero-norm vector, parallel 6D columns, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A transformed point has non-positive depth in the camera frame.
    #[error("point behind camera (depth {0})")]
    BehindCamera(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("channel mismatch: left {left}, right {right}")]
    ChannelMismatch { left: usize, right: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("bad range: {0}")]
    BadRange(String),

    #[error("bad dimensions: {0}")]
    BadDimensions(String),

    /// No epipolar sample of a ray lands inside either context view.
    #[error("all candidates occluded or out of bounds")]
    AllOccluded,

    #[error("camera sees no scene content")]
    EmptyView,

    /// One of the directed covisibility ratios is zero.
    #[error("zero overlap between views")]
    ZeroOverlap,

    #[error("sequence too short: {0} frames, need at least 3")]
    TooShort(usize),

    #[error("degenerate covisibility ratio: {0}")]
    DegenerateRatio(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    ImageCodec(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::ImageCodec(e.to_string())
    }
}
