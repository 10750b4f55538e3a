use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid landmarks: {0}")]
    Landmarks(String),

    #[error("degenerate landmark hull: {0}")]
    DegenerateHull(String),

    #[error("no landmark match available: {0}")]
    EmptyPool(String),

    #[error("warped face region leaves the source image: {0}")]
    WarpOutOfBounds(String),

    #[error("frame mismatch: {0}")]
    FrameMismatch(String),

    #[error("anchor pair {0} is not adjacent")]
    NonAdjacentPair(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("manifest references {} missing file(s): {missing:?}", missing.len())]
    MissingFiles { missing: Vec<PathBuf> },

    #[error("duplicate frame id `{0}` in manifest")]
    DuplicateFrame(String),

    #[error("video `{0}` appears in both train and test splits")]
    SplitLeak(String),

    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("checkpoint/config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("non-finite loss at epoch {epoch} step {step}; batch frames: {frames:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        frames: Vec<String>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
