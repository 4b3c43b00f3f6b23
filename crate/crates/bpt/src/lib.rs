//! Blockwise parallel transformer engine.
//!
//! The crate implements one transformer block two ways and proves them equal:
//! a naive reference (materialized attention matrix, full-width feedforward)
//! and a blockwise engine that streams KV blocks through a running-max
//! softmax and fuses the feedforward per query block. On top of the engine
//! sit an analytical activation-memory model, an allocation tracer that
//! measures live elements on the real code paths, and a small byte-level
//! language-model trainer that runs the same step under either engine.
//!
//! Everything is deterministic: f64 by default, fixed summation order, and a
//! counter-based generator, so equal inputs give bitwise-equal outputs.

pub mod blockwise;
pub mod error;
pub mod layer;
pub mod memory;
pub mod partition;
pub mod reference;
pub mod rng;
pub mod tensor;
pub mod trace;
pub mod train;
pub mod verify;

pub use error::Error;
pub use partition::BlockPartition;
pub use tensor::{Element, Tensor};

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;
