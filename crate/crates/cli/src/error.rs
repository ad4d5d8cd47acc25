use std::path::PathBuf;

use slidelab_diffusion::DiffusionError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Core(#[from] slidelab_core::Error),

    #[error(transparent)]
    Diffusion(#[from] DiffusionError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config parse: {0}")]
    TomlParse(#[from] toml::de::Error),

    #[error("config write: {0}")]
    TomlWrite(#[from] toml::ser::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{dir} is in use by another run; delete {lock} if that run is gone")]
    Locked { dir: PathBuf, lock: PathBuf },

    #[error("missing {path}; run the `{stage}` stage first")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("no fine-tuned backend for `{regime}` at {path} and fine-tuning is disabled")]
    MissingBackend { regime: String, path: PathBuf },

    #[error("{0} contains no stage artifacts")]
    EmptyRun(PathBuf),
}

impl Error {
    pub fn stage(&self) -> Option<&str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
