use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type. Numeric ops fail fast on shape or finiteness
/// violations; pipeline stages add their own context on top.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("{0}")]
    Invalid(String),

    #[error("no brain tissue component found (all-bone or empty slice)")]
    EmptyBrain,

    #[error("degenerate standard deviation {0:e}; statistics source is constant")]
    DegenerateStd(f64),

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("split: {0}")]
    Split(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged { epoch: usize, source: Box<Error> },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
