use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {op} input")]
    NonFinite { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("stale trace for head {head}: recorded policy version {recorded}, current {current}")]
    StaleTrace { head: usize, recorded: u64, current: u64 },

    #[error("grid of {cells} cells exceeds the enumeration limit of {limit}")]
    GridTooLarge { cells: usize, limit: usize },

    #[error("malformed image header at byte {offset}: {reason}")]
    ImageFormat { offset: usize, reason: String },

    #[error("{path}: line {line}: {reason}")]
    Manifest { path: PathBuf, line: usize, reason: String },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
