//! FLoRA: fused forward-backward low-rank adapters in a toy Llama-style
//! transformer.
//!
//! The crate implements the whole adapter family — naive LoRA, partially
//! fused LoRA, the fused forward adapter, and the fused forward-backward
//! variants with shared backward adapters — plus everything needed to check
//! and exercise them end to end:
//!
//! - [`tensor`] / [`tape`]: dense 2-D tensors (f32/f64) with reverse-mode
//!   differentiation on an explicit tape.
//! - [`adapters`]: fused linear layers and the per-variant forward rules.
//! - [`model`]: grouped-query-attention transformer with adapter routing,
//!   KV-cached greedy decoding, parameter accounting, and checkpoints.
//! - [`train`]: freeze-base fine-tuning on synthetic sequence tasks with a
//!   learning-rate sweep and deterministic evaluation.
//! - [`verify`]: fused-vs-reference equivalence oracles, finite-difference
//!   gradient checks, base-preservation and frozen-weight suites.
//! - [`bench`]: per-token latency measurement and exact sequential-op
//!   counting in the shape of the adapter ledger.

pub mod adapters;
pub mod bench;
pub mod config;
pub mod error;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod trace;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape};
pub use tensor::{DType, Element, Tensor};
