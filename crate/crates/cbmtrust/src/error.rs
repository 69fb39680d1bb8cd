use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error("ingestion error at {path}: {msg}")]
    Ingest { path: PathBuf, msg: String },
    #[error("ingestion error at {path}:{line}: {msg}")]
    IngestLine {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("serialization error: {0}")]
    Serde(String),
    #[error("non-finite loss component: {0}")]
    NonFinite(String),
    #[error("training failed: {0}")]
    Train(String),
    #[error("evaluation failed: {0}")]
    Eval(String),
    #[error("checkpoint schema mismatch: {0}")]
    SchemaMismatch(String),
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
