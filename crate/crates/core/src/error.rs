use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("{op}: non-finite input at element {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("backward needs a rank-0 root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size} (sequence {sequence}, position {position})")]
    TokenOutOfRange {
        id: u32,
        vocab_size: usize,
        sequence: usize,
        position: usize,
    },
    #[error("batch has no masked positions")]
    NoMaskedPositions,
    #[error("{op}: row {row} sums to {sum}, not a probability vector")]
    NotADistribution { op: &'static str, row: usize, sum: f64 },
    #[error("teacher has {teacher} heads but student has {student}; attention losses need equal head counts")]
    HeadCountMismatch { teacher: usize, student: usize },
    #[error("strategy {0} needs a teacher")]
    MissingTeacher(&'static str),
    #[error("sequence {0} has no positions eligible for masking")]
    NoEligiblePositions(usize),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus exhausted after {consumed} tokens in the unlimited regime (allowance {allowance})")]
    CorpusExhausted { consumed: u64, allowance: u64 },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("vocabulary mismatch: task uses {task}, model has {model}")]
    VocabMismatch { task: usize, model: usize },
}

pub type Result<T> = core::result::Result<T, Error>;
