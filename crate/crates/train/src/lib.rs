//! Synthetic benchmark generation and a deterministic trainer for small
//! MLP classifiers with LoRA and MoE adapters.

pub mod error;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod train;

pub use error::{Result, TrainError};
pub use model::{Adapter, MlpModel, ParamSet};
pub use synthetic::{Dataset, Examples, TaskSpec};
pub use train::{train, NoHooks, Schedule, TrainConfig, TrainHooks, TrainOutcome, Warmup};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
