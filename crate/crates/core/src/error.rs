use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: malformed line")]
    MalformedLine { file: String, line: usize },
    #[error("{file}:{line}: id out of range")]
    IdOutOfRange { file: String, line: usize },
    #[error("{file}:{line}: duplicate pair ({left}, {right})")]
    DuplicatePair {
        file: String,
        line: usize,
        left: usize,
        right: usize,
    },
    #[error("user {user} bundle {bundle} appears in both {first} and {second} splits")]
    OverlappingSplits {
        user: usize,
        bundle: usize,
        first: &'static str,
        second: &'static str,
    },
    #[error("user {0} has interacted with every bundle; no negative available")]
    NoNegativeAvailable(usize),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
    #[error("id {id} out of range (< {bound})")]
    IdOutOfBounds { id: usize, bound: usize },
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty sample list")]
    EmptySampleList,
    #[error("empty ground truth for user {0}")]
    EmptyGroundTruth(usize),
    #[error("backward requires a 1x1 output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("non-finite loss at epoch {epoch} step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(expected: impl ToString, got: impl ToString) -> Error {
    Error::DimensionMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
