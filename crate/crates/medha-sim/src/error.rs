//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    /// Model/hardware/parallelism configuration violates an invariant.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Parallelism degrees do not match the model's device shape
    /// (e.g. KV heads not shardable across the tensor-parallel degree).
    #[error("infeasible parallelism config: {0}")]
    InfeasibleParallelism(String),

    /// Requested operation is undefined for the request's current phase.
    #[error("request {id} is in phase {phase}, expected a prefill phase")]
    WrongPhase { id: u64, phase: &'static str },

    /// Matrix dimensions disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Operation requires a nonempty input.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Numeric precondition violated (zero elapsed time, attn > total, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// No KVP rank can admit the request right now.
    #[error("no KVP rank has capacity for request {0}")]
    NoRankCapacity(u64),

    /// Trace file could not be parsed.
    #[error("trace parse error at line {line}: {reason}")]
    TraceParse { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;
