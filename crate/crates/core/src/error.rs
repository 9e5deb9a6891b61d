use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic bytes {0:?}, expected \"MRC1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("unsupported dimensionality {0} (expected 1..=3)")]
    UnsupportedNdim(u8),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("dimension product overflows 2^32: {0:?}")]
    DimOverflow(Vec<u32>),
    #[error("dtype mismatch: expected {expected}, found {actual}")]
    DtypeMismatch {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("mask contains a value other than 0 or 1: {0}")]
    NonBinaryMask(u8),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse manifest: {0}")]
    ManifestParse(#[from] serde_json::Error),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("dimension mismatch in {context}: {expected:?} vs {actual:?}")]
    DimensionMismatch {
        context: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("rater count mismatch in {context}: expected {expected}, found {actual}")]
    RaterCountMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },
    #[error("sample {0:?} appears in more than one split")]
    OverlappingSplits(String),

    #[error("degenerate stack: every voxel of every rater has the same label")]
    DegenerateStack,
    #[error("{method} needs at least {min} raters, got {actual}")]
    TooFewRaters {
        method: &'static str,
        min: usize,
        actual: usize,
    },

    #[error("consensus level {level} exceeds rater count {num_raters}")]
    TargetOutOfRange { level: u16, num_raters: usize },
    #[error("inconsistent rater count across samples: {0} vs {1}")]
    InconsistentRaterCount(usize, usize),
    #[error("reference contains a single class; AUC is undefined")]
    SingleClassReference,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
