use thiserror::Error;

/// Crate-wide error type. Each variant carries a short stable code in its
/// message so callers and tests can match on it without string formatting
/// guesswork.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty-tensor: {0}")]
    EmptyTensor(String),

    #[error("bad-percentile: p must lie in (0, 1], got {0}")]
    BadPercentile(f64),

    #[error("slice-bounds: {0}")]
    SliceBounds(String),

    #[error("shape-error: {0}")]
    ShapeError(String),

    #[error("non-finite: {0}")]
    NonFinite(String),

    #[error("bad-arch: {0}")]
    BadArch(String),

    #[error("not-a-submodel: {0}")]
    NotASubmodel(String),

    #[error("bad-checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("empty-batch: {0}")]
    EmptyBatch(String),

    #[error("bad-lr: learning rate must be positive, got {0}")]
    BadLr(f64),

    #[error("cannot-shrink: {0}")]
    CannotShrink(String),

    #[error("no-updates: aggregation requires at least one client update")]
    NoUpdates,

    #[error("arch-exceeds-global: {0}")]
    ArchExceedsGlobal(String),

    #[error("too-few-samples: {0}")]
    TooFewSamples(String),

    #[error("degenerate-vector: {0}")]
    DegenerateVector(String),

    #[error("degenerate-layer: {0}")]
    DegenerateLayer(String),

    #[error("bad-config: {0}")]
    BadConfig(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
