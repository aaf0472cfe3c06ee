use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("row {row} has no unmasked entries")]
    MaskedRow { row: usize },

    #[error("division by zero in {0}")]
    DivisionByZero(&'static str),

    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    Vocabulary { id: u32, vocab_size: usize },

    #[error("position base {got} does not match cached length {expected}")]
    Position { expected: usize, got: usize },

    #[error("{what}: {requested} exceeds capacity {capacity}")]
    Capacity {
        what: &'static str,
        requested: usize,
        capacity: usize,
    },

    #[error("simulated out of memory allocating {requested} bytes for `{label}` ({live} live, budget {budget})")]
    OutOfMemory {
        label: String,
        requested: usize,
        live: usize,
        budget: usize,
    },

    #[error("index {index} out of range for {what} of length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("vocabulary of size {0} is too small to substitute tokens")]
    DegenerateVocabulary(usize),

    #[error("target mask selects no positions")]
    EmptyTarget,

    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("complexity mismatch at {point}: measured {measured}, predicted {predicted}")]
    ComplexityMismatch {
        point: String,
        measured: u64,
        predicted: u64,
    },

    #[error("memory model exceeded at {point}: peak {peak} bytes, bound {bound}")]
    MemoryModel {
        point: String,
        peak: usize,
        bound: usize,
    },
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn is_oom(&self) -> bool {
        matches!(self, Error::OutOfMemory { .. })
    }
}
