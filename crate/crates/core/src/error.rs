use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dataset not found: {0}")]
    DatasetNotFound(PathBuf),

    #[error("subset `{0}` has no usable clips (every clip needs at least 3 frames)")]
    EmptySubset(String),

    #[error("domain {0} has no training clips")]
    EmptyDomain(String),

    #[error("clip `{clip}` has {len} frames, at least 3 are required")]
    ClipTooShort { clip: String, len: usize },

    #[error("cannot read image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("invalid layer id {0}")]
    UnknownLayer(usize),

    #[error("location {location} out of range for layer {layer} with {extent} positions")]
    LocationOutOfRange {
        layer: usize,
        location: usize,
        extent: usize,
    },

    #[error("external similarity needs at least 2 locations per layer, layer {layer} has {count}")]
    TooFewLocations { layer: usize, count: usize },

    #[error("temperature must be positive, got {0}")]
    Temperature(f64),

    #[error("adversarial scores must lie in (0, 1) in log mode (found {0})")]
    ScoreRange(f64),

    #[error("degenerate motion-degree vector")]
    DegenerateMotion,

    #[error("non-finite value in loss term `{term}`{}", .iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NonFinite {
        term: &'static str,
        iteration: Option<u64>,
    },

    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Metric(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
