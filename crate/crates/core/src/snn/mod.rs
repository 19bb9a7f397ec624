//! Spiking inference: neuron dynamics, input encoding, the two propagation
//! schedulers, and spike train dumps.

pub mod dump;
mod engine;
pub mod neuron;

pub use engine::{
    encode_input_block, run_snn, run_snn_with, step_current, CostLedger, EngineOptions,
    LayerTrace, Scheduler, SnnTrace,
};
pub use neuron::{fire_baseline, fire_modified, fire_modified_tensor, modified_offset};

use thiserror::Error;

use crate::ann::AnnError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum SnnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ann(#[from] AnnError),
    #[error("{0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, SnnError>;
