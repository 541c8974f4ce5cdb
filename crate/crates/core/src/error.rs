use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("row {row} has near-zero norm and cannot be normalized")]
    DegenerateRow { row: usize },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("target row {row} sums to {sum}, expected a probability distribution")]
    TargetNormalization { row: usize, sum: f64 },
    #[error("row {row} has norm {norm}, expected unit-normalized input")]
    Normalization { row: usize, norm: f64 },
    #[error("backward already ran on this tape; call zero_grad before reusing it")]
    BackwardTwice,
    #[error("parameter {index} has no gradient")]
    UnsteppedParameter { index: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("sentence {sentence}: unrecognized token `{token}`")]
    Parse { sentence: usize, token: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid attribute vector: {0}")]
    InvalidAttribute(String),
    #[error("batch of size {n} is too small for a contrastive loss")]
    DegenerateBatch { n: usize },
    #[error("cross-attention needs at least one key/value row")]
    EmptyAttendee,
    #[error("aggregated embedding has zero norm")]
    DegenerateAggregate,
    #[error("sentence {index} contains no tokens")]
    EmptyText { index: usize },
    #[error("metric undefined: {0}")]
    MetricUndefined(&'static str),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Decode {
        path: String,
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for failures caused by the filesystem rather than by the data or
    /// configuration.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::Json(e) => e.is_io(),
            _ => false,
        }
    }
}
