//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (bad view count, fov out of range, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor/image shape mismatch between producer and consumer.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// All source landmarks coincide; the scale denominator is zero.
    #[error("degenerate landmarks: source points coincide")]
    DegenerateLandmarks,

    /// Camera at zero distance from the origin; relative pose is undefined.
    #[error("degenerate camera: zero distance from origin")]
    DegenerateCamera,

    /// Checkpoint incompatible with the current configuration.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// Malformed file content (PLY, IMGF, manifest, checkpoint).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("missing file: {0}")]
    MissingFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
