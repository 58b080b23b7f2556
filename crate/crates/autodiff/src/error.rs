use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward was already run on this graph; rebuild the forward pass first")]
    BackwardTwice,
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
