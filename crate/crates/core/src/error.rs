use thiserror::Error;

/// Errors raised by the estimation, selection, and simulation layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum MirtError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid question `{id}`: {reason}")]
    InvalidQuestion { id: String, reason: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("duplicate response for snapshot {snapshot}, question {question}")]
    DuplicateResponse { snapshot: usize, question: usize },

    #[error("unknown question `{0}`")]
    UnknownQuestion(String),

    #[error("objective became non-finite at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("empty training selection")]
    EmptySelection,
}

pub type Result<T, E = MirtError> = std::result::Result<T, E>;
