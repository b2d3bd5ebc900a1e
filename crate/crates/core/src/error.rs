use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("graph was already consumed by a non-retaining backward pass")]
    GraphConsumed,

    #[error("variable belongs to a different graph")]
    ForeignVariable,

    #[error("unknown parameter slot `{0}`")]
    UnknownSlot(String),

    #[error("duplicate parameter slot `{0}`")]
    DuplicateSlot(String),

    #[error("layer dimensions do not chain: layer {index} expects {expected} inputs but receives {found}")]
    DimMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("finite differences: objective evaluated to a non-finite value at coordinate {coordinate} of `{slot}`")]
    NonFiniteObjective { slot: String, coordinate: usize },

    #[error("meta-training diverged at meta-step {meta_step}, task {task}, step {step}: {reason}")]
    Diverged {
        meta_step: usize,
        task: usize,
        step: usize,
        reason: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
