//! Experiment orchestration: configuration, the on-disk run layout, the
//! staged pipeline, and the figure tables it emits.

pub mod config;
pub mod figures;
pub mod pipeline;
pub mod store;

pub use config::ExperimentConfig;
pub use pipeline::{MetricsDoc, Pipeline, Stage, StageReport};
pub use store::RunDirs;
