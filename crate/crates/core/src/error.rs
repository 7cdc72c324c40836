use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("unknown method '{name}' (known: {known})")]
    UnknownMethod { name: String, known: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] qup_nn::NnError),
    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// A short stable name for the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Shape(_) => "shape",
            Error::Singular(_) => "singular",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::UnknownMethod { .. } => "unknown_method",
            Error::Parse(_) => "parse",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Nn(_) => "nn",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
