//! Decision-transformer backbone with hand-derived gradients.

pub mod checkpoint;
pub mod layers;
pub mod lphm;
pub mod model;
pub mod optim;
pub mod store;

pub use checkpoint::{Checkpoint, Manifest, TensorEntry};
pub use lphm::{kron, lphm_weight, AdapterConfig, LphmShape};
pub use model::{Batch, ForwardPass, ModelConfig, PolicyModel, INITIAL_TEMPERATURE, LOG_TEMPERATURE};
pub use optim::{AdamW, AdamWConfig};
pub use store::{is_finetune_tensor, Float, Gradients, ParamId, ParameterStore, Tensor, TrainableSet};

#[cfg(test)]
mod tests;
