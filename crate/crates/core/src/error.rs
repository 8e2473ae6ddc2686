use std::io;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("plane depth must be positive and finite, got {0}")]
    InvalidDepth(f64),

    #[error("homography is singular (|det| = {0:e})")]
    SingularHomography(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no valid pixels: {0}")]
    NoValidPixels(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("rendering failed: {0}")]
    Render(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
