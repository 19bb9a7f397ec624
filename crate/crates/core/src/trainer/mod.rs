//! Desk-scale training: data ingestion, run configuration, the activity
//! regularizer, and the SGD loop.

pub mod config;
pub mod data;
pub mod regularizer;
mod train;

pub use config::{ConfigError, RunConfig};
pub use data::{gen_synthetic, Dataset};
pub use regularizer::{count_bits, sparsity_grad, sparsity_loss};
pub use train::{
    accuracy, bit_density, train, EpochStats, History, RegularizerConfig, TrainConfig,
    TrainError, BN_EPS, BN_MOMENTUM,
};
