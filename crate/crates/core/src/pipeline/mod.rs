//! Training loop, checkpoints and generation.

mod checkpoint;
mod config;
mod generate;
mod model;
mod train;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{MlpConfig, RunConfig, TrainConfig};
pub use generate::{generate, generate_on};
pub use model::{split_nodes, Denoiser, DenoiserModel, NodeSplit};
pub use train::{loss_at, train, EpochStats, VALIDATION_GRID};
