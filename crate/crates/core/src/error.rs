use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the slide classification side of the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("manifest line {line}: duplicate slide_id `{slide_id}`")]
    DuplicateSlide { line: usize, slide_id: String },

    #[error("manifest line {line}: label `{label}` is not in the class set")]
    UnknownLabel { line: usize, label: String },

    #[error("manifest line {line}: image {path} does not exist")]
    MissingImage { line: usize, path: PathBuf },

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("cannot encode image {path}: {message}")]
    Encode { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("split ratios must sum to 1 (got {0})")]
    SplitRatios(f64),

    #[error("slide `{slide_id}` is already assigned to a split")]
    AlreadyAssigned { slide_id: String },

    #[error("patch is {actual}x{actual_h}, expected {expected}x{expected}")]
    PatchSize {
        expected: u32,
        actual: u32,
        actual_h: u32,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no tissue patches: the slide cannot be classified")]
    NoTissue,

    #[error("label index {index} is outside the class set of size {classes}")]
    LabelOutOfRange { index: usize, classes: usize },

    #[error("patch at ({x}, {y}) size {size} lies outside the {width}x{height} slide")]
    OutOfBounds {
        x: u32,
        y: u32,
        size: u32,
        width: u32,
        height: u32,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
