use std::path::PathBuf;

use crate::model::Modality;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the search pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("invalid value {value:?} for {field}")]
    InvalidEnum { field: &'static str, value: String },
    #[error("{field} out of range: {value}")]
    InvalidRange { field: &'static str, value: String },
    #[error("duplicate slide id {0:?}")]
    DuplicateSlideId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid slide: {0}")]
    InvalidSlide(String),

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("failed to decode {}: {message}", path.display())]
    Decode { path: PathBuf, message: String },
    #[error("channel dimensions differ: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("image {width}x{height} is smaller than patch size {patch_size}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        patch_size: usize,
    },
    #[error("invalid tiling configuration: {0}")]
    InvalidTiling(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("vector dimension mismatch: {0} vs {1}")]
    VectorDimension(usize, usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("sequence is empty")]
    EmptySequence,
    #[error("degenerate least-squares system: {0}")]
    DegenerateSystem(String),

    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("graph needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("graph has no positive edge weight")]
    EmptyGraph,
    #[error("community {0} has no members")]
    EmptyCommunity(usize),
    #[error("partition does not match input: {0}")]
    PartitionMismatch(String),
    #[error("nprobe {nprobe} outside 1..={communities}")]
    InvalidProbe { nprobe: usize, communities: usize },

    #[error("no ballots to tabulate")]
    NoBallots,

    #[error("corpus contains no MIF slides")]
    NoMifSlides,
    #[error("model checkpoint missing: {}", .0.display())]
    CheckpointMissing(PathBuf),
    #[error("query slide has modality {0}, expected HE")]
    WrongModality(Modality),
    #[error("index holds no latents")]
    EmptyIndex,
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("all points are identical")]
    ZeroVariance,

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
