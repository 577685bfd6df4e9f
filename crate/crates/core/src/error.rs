use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation: quaternion has zero norm")]
    DegenerateRotation,

    #[error("malformed SH block: {0} coefficients is not 3 x (L+1)^2 for L in 0..=3")]
    MalformedSh(usize),

    #[error("non-finite {field} on Gaussian {index}")]
    NonFinite { index: usize, field: &'static str },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("forward/backward state mismatch: {0}")]
    StateMismatch(String),

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("score-modulated mask requires importance scores")]
    MissingScores,

    #[error("empty model after prune")]
    EmptyAfterPrune,

    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("PLY parse error: {0}")]
    Ply(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
