use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PcanError {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("coordinate convention mismatch: {0:?} vs {1:?}")]
    ConventionMismatch(crate::geometry::Convention, crate::geometry::Convention),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("negative sampler exhausted after {attempts} attempts: {constraint}")]
    SamplerExhausted { attempts: usize, constraint: String },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocabulary { id: usize, vocab: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss component `{component}` ({value})")]
    NonFiniteLoss { component: String, value: f64 },

    #[error("expression length {0} falls outside every bucket")]
    Unbucketed(usize),

    #[error("bad array file {path}: {reason}")]
    ArrayFormat { path: PathBuf, reason: String },

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png encoding: {0}")]
    Png(String),
}

pub type Result<T> = std::result::Result<T, PcanError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> PcanError {
    let path = path.into();
    move |source| PcanError::Io { path, source }
}
