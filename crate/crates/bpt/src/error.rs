use thiserror::Error;

/// Unified error type for the engine, model, tracer, and trainer.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up for the named operation.
    #[error("{op}: shape mismatch, {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A block size does not evenly divide the dimension it partitions.
    #[error("partition: block size {block} does not divide length {len}")]
    Partition { len: usize, block: usize },

    /// A softmax row contained only mask-constant entries.
    #[error("row_softmax: row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    /// A cross-entropy target index is outside the vocabulary.
    #[error("cross_entropy: target {target} at position {position} exceeds vocab {vocab}")]
    TargetOutOfRange {
        position: usize,
        target: usize,
        vocab: usize,
    },

    /// An allocation would push traced live elements past the configured cap.
    #[error("memory cap exceeded: {live} live + {requested} requested > cap {cap} elements")]
    MemoryCap { live: u64, requested: u64, cap: u64 },

    /// The memory budget cannot hold even the context-independent state.
    #[error("infeasible: fixed cost {floor_bytes} bytes exceeds budget {budget_bytes} bytes")]
    Infeasible { floor_bytes: u128, budget_bytes: u128 },

    /// Configuration failed validation; every violation is listed.
    #[error("invalid config:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    /// The training corpus is too short for the requested sequence length.
    #[error("corpus {path}: {tokens} tokens, need at least {needed}")]
    CorpusTooSmall {
        path: String,
        tokens: usize,
        needed: usize,
    },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
