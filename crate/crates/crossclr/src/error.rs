//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {0} has zero (or near-zero) norm")]
    ZeroVectorRow(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("self-exclusion requires at least two samples in the same set")]
    DegenerateSelfExclusion,
    #[error("degenerate connectivity scores: {0}")]
    DegenerateScores(String),
    #[error("weight exponent {0} overflows exp; use sum-to-one normalization or a larger kappa")]
    WeightOverflow(f64),
    #[error("batch of {batch} samples exceeds queue capacity {capacity}")]
    BatchLargerThanCapacity { batch: usize, capacity: usize },
    #[error("queue is empty")]
    EmptyQueue,
    #[error("queue contract violated: {0}")]
    QueueContract(String),
    #[error("batch too small: need at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("anchor {0} has no negatives left after pruning")]
    InsufficientNegatives(usize),
    #[error("top-k of {k} exceeds influential set of size {available}")]
    KExceedsInfluentialSet { k: usize, available: usize },
    #[error("loss evaluated to a non-finite value")]
    NonFiniteLoss,
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("truncated file at byte offset {offset}")]
    TruncatedFile { offset: u64 },
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("dataset split is empty or missing: {0}")]
    EmptyDataset(String),
    #[error("config error: {0}")]
    ConfigParse(String),
    #[error("path error: {0}")]
    PathError(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
