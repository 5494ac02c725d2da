use thiserror::Error;

/// Every failure the library can report.
///
/// Variant names double as the stable diagnostic identifiers printed by the
/// command-line driver, see [`Error::name`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("inconsistent embedding dimension at line {line}: expected {expected}, got {got}")]
    InconsistentDimension {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("duplicate chunk id {chunk_id:?} in episode {episode_id:?}")]
    DuplicateChunkId {
        episode_id: String,
        chunk_id: String,
    },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("chunk {0:?} has no embedding")]
    MissingEmbedding(String),
    #[error("episode has no chunks")]
    EmptyEpisode,
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("no graph cached for episode {0:?}")]
    MissingGraph(String),
    #[error("unknown chunk {0:?}")]
    UnknownChunk(String),
    #[error("every subgraph in the batch has zero edges")]
    AllGraphsIsolated,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid segment ids: {0}")]
    InvalidSegmentIds(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("loss does not depend on any trainable tensor")]
    DetachedLoss,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("segment {0} is a complete graph, no non-edges to sample")]
    DegenerateGraph(usize),
    #[error("no non-relevant chunk available for query {0:?}")]
    NoNegativesAvailable(String),
    #[error("no query yields both a positive and a negative")]
    NoTriplets,
    #[error("training data contains a single class")]
    SingleClassData,
    #[error("index is empty")]
    EmptyIndex,
    #[error("model parameters not loaded")]
    ModelNotLoaded,
    #[error("stage-1 backbone checkpoint not found: {0}")]
    MissingBackbone(String),
    #[error("query {0:?} has no ground truth")]
    NoGroundTruth(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Variant name, used as the one-word diagnostic by the CLI.
    pub fn name(&self) -> &'static str {
        match self {
            Error::ZeroVector => "ZeroVector",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::ParseError { .. } => "ParseError",
            Error::InconsistentDimension { .. } => "InconsistentDimension",
            Error::DuplicateChunkId { .. } => "DuplicateChunkId",
            Error::InvalidData(_) => "InvalidData",
            Error::MissingEmbedding(_) => "MissingEmbedding",
            Error::EmptyEpisode => "EmptyEpisode",
            Error::UnknownNode(_) => "UnknownNode",
            Error::MissingGraph(_) => "MissingGraph",
            Error::UnknownChunk(_) => "UnknownChunk",
            Error::AllGraphsIsolated => "AllGraphsIsolated",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::InvalidSegmentIds(_) => "InvalidSegmentIds",
            Error::NotScalarLoss(_) => "NotScalarLoss",
            Error::DetachedLoss => "DetachedLoss",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::BadMagic => "BadMagic",
            Error::VersionUnsupported(_) => "VersionUnsupported",
            Error::ChecksumMismatch => "ChecksumMismatch",
            Error::DegenerateGraph(_) => "DegenerateGraph",
            Error::NoNegativesAvailable(_) => "NoNegativesAvailable",
            Error::NoTriplets => "NoTriplets",
            Error::SingleClassData => "SingleClassData",
            Error::EmptyIndex => "EmptyIndex",
            Error::ModelNotLoaded => "ModelNotLoaded",
            Error::MissingBackbone(_) => "MissingBackbone",
            Error::NoGroundTruth(_) => "NoGroundTruth",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
