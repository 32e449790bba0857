//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("duplicate timestamp {timestamp}")]
    DuplicateTimestamp { timestamp: i64 },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("empty series")]
    EmptySeries,
    #[error("split boundary outside series")]
    BoundaryOutsideSeries,
    #[error("feature `{0}` has zero variance on the training range")]
    DegenerateFeature(String),
    #[error("series too short: no window of length {l_seq} fits")]
    SeriesTooShort { l_seq: usize },
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training data contains a single class")]
    SingleClassTraining,
    #[error("loss became non-finite at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("solver did not converge within {0} passes")]
    NoConvergence(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("validation set contains no positive labels")]
    NoPositives,
    #[error("empty scored set")]
    EmptySet,
    #[error("kernel matrix ill-conditioned, jitter escalation failed")]
    IllConditionedKernel,
    #[error("objective evaluation failed at {lambda:?}: {source}")]
    ObjectiveFailure {
        lambda: Vec<f64>,
        #[source]
        source: Box<Error>,
    },
    #[error("model `{0}` has no tunable hyperparameters")]
    UnsupportedModel(String),
    #[error("invalid model artifact: {0}")]
    BadArtifact(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
