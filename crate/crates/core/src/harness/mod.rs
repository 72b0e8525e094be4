//! Training runs: data, models, configs, metrics, checkpoints and landscapes.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod landscape;
pub mod metrics;
pub mod model;
pub mod protocols;
pub mod train;

pub use config::TrainConfig;
pub use data::{ingest_dataset, DataSplit, Dataset, DatasetSpec};
pub use model::{Model, ModelSpec, PassPrecision};
pub use checkpoint::Checkpoint;
pub use metrics::{EpochRecord, MetricsLog};
pub use train::{evaluate, train, Trainer};
