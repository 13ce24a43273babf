use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max}): need x_min < x_max and y_min < y_max")]
    InvalidBox { x_min: i64, y_min: i64, x_max: i64, y_max: i64 },
    #[error("region outside frame")]
    RegionOutsideFrame,
    #[error("scale ratio {0} outside (0, 1]")]
    RatioOutOfRange(f64),
    #[error("invalid scale intervals: {0}")]
    InvalidIntervals(String),
    #[error("degenerate frame: no proposal window fits")]
    DegenerateFrame,
    #[error("no annotations")]
    NoAnnotations,
    #[error("proposals not sorted by objectness (rank {rank})")]
    UnsortedProposals { rank: usize },

    #[error("invalid code matrix: {0}")]
    InvalidCodes(String),
    #[error("layer absent: {layer} (image {image})")]
    LayerAbsent { image: String, layer: String },
    #[error("no regions in image {0}")]
    NoRegions(String),
    #[error("empty region index set")]
    EmptySelection,
    #[error("rootsift requires non-negative input (entry {index} = {value})")]
    NegativeRootSift { index: usize, value: f64 },
    #[error("provenance undefined for average pooling")]
    NoProvenance,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),

    #[error("empty ensemble for category {0}")]
    EmptyEnsemble(String),

    #[error("undefined AP: no relevant items")]
    UndefinedAp,
    #[error("category {category}: {source}")]
    Category { category: String, source: Box<Error> },
    #[error("invalid evaluation input: {0}")]
    InvalidEvaluation(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("code file truncated: {path} has {actual} bytes, expected {expected}")]
    Truncated { path: PathBuf, expected: u64, actual: u64 },
    #[error("model file format version {found} does not match supported version {expected}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("image {image}: {message}")]
    Record { image: String, message: String },
    #[error("invalid synthetic spec: {0}")]
    InvalidSynth(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn in_category(self, category: &str) -> Self {
        Error::Category { category: category.to_string(), source: Box::new(self) }
    }
}
