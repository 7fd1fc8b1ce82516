//! File formats: config, checkpoints, metrics and IDX datasets.

pub mod checkpoint;
pub mod config;
pub mod idx;
pub mod metrics;

pub use checkpoint::{Checkpoint, Digest};
pub use config::{Config, ModelConfig, LayerConfig, OutputConfig};
pub use metrics::{LayerMetrics, MetricRecord};
