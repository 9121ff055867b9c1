use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("graph has already been differentiated")]
    AlreadyDifferentiated,

    #[error("nifti format error: {0}")]
    Format(String),

    #[error("truncated nifti data: expected more bytes at offset {offset}")]
    Truncated { offset: usize },

    #[error("unsupported nifti feature: {0}")]
    Unsupported(String),

    #[error("raw label value {0} is not covered by the label mapping")]
    UnmappedLabel(i64),

    #[error("empty training split")]
    EmptySplit,

    #[error("only one class present; AUC is undefined")]
    SingleClass,

    #[error("rank guard: {0}")]
    Rank(String),

    #[error("class {class} has {count} members, fewer than k = {k}")]
    ClassTooSmall { class: u8, count: usize, k: usize },

    #[error("phantom generation failed: {0}")]
    Phantom(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
