use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate {coords:?} out of range at level {level}")]
    CoordsOutOfRange { coords: [u32; 3], level: u32 },

    #[error("{path}: {kind} at {location}")]
    PlyParse {
        path: PathBuf,
        kind: String,
        /// `line N` for header errors, `byte N` for payload errors.
        location: String,
    },

    #[error("container format error: {0}")]
    Format(String),

    #[error("entropy stream error: {0}")]
    Stream(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
