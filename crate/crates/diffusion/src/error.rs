use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token `{0}` is already in the vocabulary")]
    TokenExists(String),

    #[error("initializer `{text}` must map to exactly one known token, got {ids:?}")]
    Initializer { text: String, ids: Vec<u32> },

    #[error("image is {width}x{height}, expected {expected}x{expected}")]
    Resolution { expected: u32, width: u32, height: u32 },

    #[error("timestep {timestep} outside the scheduler range 0..{limit}")]
    Timestep { timestep: usize, limit: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("regime `{0}` is not valid for this operation")]
    Regime(String),

    #[error("backend format: {0}")]
    Format(String),

    #[error(transparent)]
    Core(#[from] slidelab_core::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DiffusionError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DiffusionError {
    let path = path.into();
    move |source| DiffusionError::Io { path, source }
}
