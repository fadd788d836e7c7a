use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}: non-finite value")]
    NonFinite(String),

    #[error("softmax row {row} is fully masked")]
    FullyMasked { row: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,

    #[error("loss is detached from every parameter")]
    Detached,

    #[error("{what} = {value} is out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        value: String,
        limit: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{file}: missing required column `{column}`")]
    MissingColumn { file: String, column: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{what} hash mismatch: checkpoint has {expected}, supplied {found}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn out_of_range(what: &'static str, value: impl ToString, limit: impl ToString) -> Self {
        Error::OutOfRange {
            what,
            value: value.to_string(),
            limit: limit.to_string(),
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::FullyMasked { .. } => "fully_masked",
            Error::NotScalar(_) => "not_scalar",
            Error::BackwardTwice => "backward_twice",
            Error::Detached => "detached",
            Error::OutOfRange { .. } => "out_of_range",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::MissingColumn { .. } => "missing_column",
            Error::Checkpoint(_) => "checkpoint",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code: 1 for validation failures, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Data(_)
            | Error::MissingColumn { .. }
            | Error::OutOfRange { .. }
            | Error::Shape { .. }
            | Error::Csv(_)
            | Error::HashMismatch { .. } => 1,
            _ => 2,
        }
    }
}
