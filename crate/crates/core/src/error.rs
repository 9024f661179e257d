use std::io;

/// Errors produced by the place-recognition pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward called on a tensor that is not recorded on a gradient tape")]
    Detached,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("empty scan")]
    EmptyScan,
    #[error("empty range image")]
    EmptyRangeImage,
    #[error("undefined overlap")]
    UndefinedOverlap,
    #[error("unknown trajectory pattern '{0}'")]
    UnknownPattern(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty database")]
    EmptyDatabase,
    #[error("no evaluable queries")]
    NoEvaluableQueries,
    #[error("no training tuple could be formed")]
    NoTrainingTuples,
    #[error("loss diverged (non-finite) at step {step}")]
    Divergence { step: usize },
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
