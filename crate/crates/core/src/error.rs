use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the extraction core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient flowing out of `{0}`")]
    NonFiniteGradient(&'static str),
    #[error("non-finite loss (ner={ner}, re={re})")]
    NonFiniteLoss { ner: f64, re: f64 },
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("unknown {kind} type `{symbol}`")]
    UnknownSymbol { kind: &'static str, symbol: String },
    #[error("invalid sentence: {0}")]
    InvalidSentence(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected {expected}, got {actual}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
}

pub type Result<T> = core::result::Result<T, Error>;
