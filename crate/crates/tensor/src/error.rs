use thiserror::Error;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("unknown op kind `{0}`")]
    UnknownOp(String),
    #[error("{op}: missing attribute `{attr}`")]
    MissingAttr { op: &'static str, attr: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
