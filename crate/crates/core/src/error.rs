use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the core crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardConsumed,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint record `{name}` has shape {found:?}, model expects {expected:?}")]
    RecordShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("dataset error in {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, left: &[usize], right: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    })
}
