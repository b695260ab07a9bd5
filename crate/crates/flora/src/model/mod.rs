//! Toy Llama-shaped transformer with adapter routing.

pub mod checkpoint;
pub mod config;
mod transformer;

pub use config::{enumerated_trainable, param_count, tensor_manifest, ModelConfig, ParamCount};
pub use transformer::{argmax_col, backward_adapters_per_layer, KvCache, TransformerModel};
