//! Run configuration, checkpoints, metrics logs and report rendering.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod report;
pub mod svg;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointKind};
pub use config::{ConfigError, RunConfig, TrainConfig};
pub use metrics::{MetricsRecord, MetricsWriter};
