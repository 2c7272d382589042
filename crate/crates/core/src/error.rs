//! Crate-wide error type.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Serializable so it can cross the HTTP boundary unchanged.
#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum Error {
    // geometry / workspace
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("geometry does not intersect the workspace ROI")]
    OutOfRoi,
    #[error("io error: {0}")]
    Io(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("missing layer `{0}`")]
    MissingLayer(String),
    #[error("layer extent does not intersect the ROI: `{0}`")]
    LayerOutsideRoi(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("illegal label transition {from:?} -> {to:?}")]
    IllegalTransition {
        from: crate::vector::LabelStatus,
        to: crate::vector::LabelStatus,
    },

    // geomemory
    #[error("retrieve needs at least one filter")]
    EmptyQuery,
    #[error("not found: {0}")]
    NotFound(String),
    #[error("entry {0} is already deleted")]
    AlreadyDeleted(u64),

    // embeddings
    #[error("zero vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding index is empty")]
    EmptyIndex,
    #[error("k={k} is larger than the index ({size} items)")]
    KTooLarge { k: usize, size: usize },
    #[error("k must be at least 1")]
    KZero,
    #[error("unsupported embedding input: {0}")]
    UnsupportedInput(String),

    // navigation
    #[error("workspace has no raster layers")]
    NoLayers,
    #[error("patch budget must be at least 1")]
    BudgetZero,
    #[error("confidence map is entirely nodata")]
    AllNoData,
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),

    // perception
    #[error("no perceptor registered for task `{0}`")]
    UnknownTask(String),
    #[error("perceptor call budget exhausted ({0} calls)")]
    CallBudgetExhausted(u64),
    #[error("perception query has no patches")]
    NoPatches,

    // compute graph
    #[error("cycle detected at node `{0}`")]
    CycleDetected(String),
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("parameter schema error on node `{node}`: {reason}")]
    ParamSchema { node: String, reason: String },
    #[error("graph has {nodes} nodes, budget allows {limit}")]
    GraphTooLarge { nodes: usize, limit: u64 },
    #[error("node `{node}` failed: {cause}")]
    RuntimeOp { node: String, cause: String },
    #[error("continuation token does not match graph {0}")]
    TokenMismatch(String),
    #[error("execution stalled: node `{0}` can never fit the budget")]
    Stalled(String),
    #[error("bands are not co-registered: {0}")]
    BandMismatch(String),
    #[error("polygon covers no cell centers")]
    NoCellsCovered,

    // propagation / review
    #[error("seed set has no positives")]
    EmptySeedSet,
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("candidate `{0}` is no longer a pending suggestion")]
    StaleCandidate(String),
    #[error("decision batch is empty")]
    EmptyBatch,

    // attribution
    #[error("missing source layer `{0}`")]
    MissingSourceLayer(String),
    #[error("fixture miss: source `{source_name}` has no entry for key `{key}`")]
    FixtureMiss { source_name: String, key: String },
    #[error("raster stack must have at least two strictly increasing timestamps")]
    UnsortedStack,

    // dual modeling
    #[error("training set needs at least two classes")]
    SingleClass,

    // session / benchmark
    #[error("operation `{op}` is not available at capability level {level:?}")]
    CapabilityDenied {
        op: String,
        level: crate::session::CapabilityLevel,
    },
    #[error("no quality samples")]
    EmptySamples,
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("invalid world spec: {0}")]
    SpecInvalid(String),
    #[error("session is finished")]
    SessionFinished,
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Schema(e.to_string())
    }
}
