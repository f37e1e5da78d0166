//! Experiment harness: dataset ingestion, configuration, pipelines and
//! manifests for the scotopic toolkit.

pub mod config;
pub mod experiment;
pub mod idx;
pub mod manifest;

pub use config::{ExperimentConfig, ModelKind};
pub use experiment::{run_experiment, run_task, Task};
pub use manifest::ExperimentManifest;
