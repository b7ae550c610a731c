//! Experiment orchestration over the synthetic benchmark: per-seed setup,
//! cached sweep cells, CSV reports and the pipelines behind the `upcycle`
//! command.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipelines;
pub mod report;
pub mod setup;

pub use config::{ExperimentConfig, Mode};
pub use error::{HarnessError, Result};
pub use pipelines::{Runner, Sweep, Variant};
