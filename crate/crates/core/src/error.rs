use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("gaussian is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("view direction is undefined: position coincides with the camera center")]
    DegenerateDirection,
    #[error("direction is not unit length (norm = {norm})")]
    NotUnit { norm: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image too small: {0}")]
    TooSmall(String),
    #[error("{height}x{width} is not divisible by factor {factor}")]
    NotDivisible {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("missing image {0}")]
    MissingImage(PathBuf),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("resolution mismatch for {path}: expected {expected:?}, got {got:?}")]
    ResolutionMismatch {
        path: PathBuf,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
