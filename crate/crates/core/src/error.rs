use std::io;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty graph")]
    EmptyGraph,

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("gradient check requires a scalar output, got shape [{0}, {1}]")]
    NonScalar(usize, usize),

    #[error("missing day {0} in the daily buffer")]
    MissingDay(i64),

    #[error("missing steps in assignment records: {0:?}")]
    MissingSteps(Vec<usize>),

    #[error("no hot link has drift statistics at this step")]
    NoCoveredLinks,

    #[error("shadow encoder version mismatch: statistics built with v{stats}, embeddings from v{embeddings}")]
    ShadowVersionMismatch { stats: u64, embeddings: u64 },

    #[error("insufficient lookback: step {step} needs {lookback} steps of history")]
    InsufficientLookback { step: usize, lookback: usize },

    #[error("cache cold: no embedding snapshot at or before step {0}")]
    CacheCold(usize),

    #[error("route references unknown link {0}")]
    UnknownLink(usize),

    #[error("empty route")]
    EmptyRoute,

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-positive ground truth {value} at index {index}")]
    NonPositiveTruth { index: usize, value: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
