//! Core algebra for upcycling fine-tuned checkpoints: tensors, the UPCK
//! archive format, model merging, LoRA adapters, mixture-of-experts layers
//! and data-difficulty analysis.

pub mod checkpoint;
pub mod difficulty;
pub mod error;
pub mod lora;
pub mod merging;
pub mod moe;
pub mod rng;
pub mod store;
pub mod tensor;

pub use checkpoint::{Checkpoint, Meta, ParamMap, TaskVector};
pub use error::{Error, FormatError, Result, TensorError};
pub use lora::{LoraAdapter, LoraModel};
pub use merging::{MergeConfig, MergeMethod};
pub use moe::{MoeLayer, MoeModel, RoutingDecision};
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
