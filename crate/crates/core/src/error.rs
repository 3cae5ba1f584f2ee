use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("missing embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("category {0:?} has no words left")]
    EmptyCategory(String),
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("need at least {needed} paired samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("matrix is not positive definite: {0}")]
    SingularMatrix(String),
    #[error("modality gap is degenerate (norm {0:e})")]
    DegenerateGap(f64),
    #[error("reference vector has zero norm")]
    DegenerateReference,
    #[error("lambda search failed at every grid point: {0}")]
    SearchFailed(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::SingularMatrix(_)
            | Error::DegenerateGap(_)
            | Error::DegenerateReference
            | Error::SearchFailed(_)
            | Error::Divergence { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
