use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum SimError {
    /// A precondition on an operation's inputs was violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// A trace or policy file could not be parsed.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Policy generation exhausted the candidate list while memory
    /// reductions were still outstanding.
    #[error("cannot avoid OOM: no swap candidate covers op {op_index} (residual {residual_bytes} bytes)")]
    Infeasible {
        op_index: usize,
        residual_bytes: u64,
    },

    /// The allocator could not satisfy a request even after releasing
    /// pending blocks, defragmenting, and passive swapping.
    #[error("out of memory at op {op_index}: requested {requested} bytes")]
    Oom { op_index: usize, requested: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

impl SimError {
    pub fn validation(msg: impl Into<String>) -> Self {
        SimError::Validation(msg.into())
    }
}
