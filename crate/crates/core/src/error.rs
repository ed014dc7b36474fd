use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("mask entries must be 0 or the masked sentinel, found {0}")]
    InvalidMask(f64),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss does not depend on any tensor that requires grad")]
    Detached,
    #[error("backward already ran on this graph; call reset_backward first")]
    AlreadyBackpropagated,
    #[error("function is not deterministic: two evaluations at the same input differ")]
    NonDeterministic,
    #[error("zero-norm row in {0}")]
    ZeroNorm(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
