//! Post-hoc analysis: error decomposition, spiking activity, operation counts
//! and energy, and the JSON report that bundles them.

mod activity;
mod energy;
mod errors;
mod report;

pub use activity::{plane_density, spiking_activity, LayerActivity, SpikingActivity};
pub use energy::{
    ac_per_shift_ratio, count_ops, estimate_energy, EnergyReport, EnergyTable, LayerEnergy,
    LayerKind, LayerOps, OpCounts, OpEnergy,
};
pub use errors::{
    decompose_errors, expected_quantization_error, uniform_drive_quantization_error,
    ErrorDecomposition, LayerErrors, Reference,
};
pub use report::{AnalysisReport, Provenance, SweepPoint, REPORT_SCHEMA_VERSION};

use thiserror::Error;

use crate::ann::{AnnError, AnnModel};
use crate::convert::{convert, ConvertError, SnnModel};
use crate::snn::{run_snn, Scheduler, SnnError};
use crate::tensor::TensorError;
use crate::trainer::Dataset;

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ann(#[from] AnnError),
    #[error(transparent)]
    Snn(#[from] SnnError),
    #[error(transparent)]
    Convert(#[from] ConvertError),
    #[error("energy table has no entry for {width}-bit operations")]
    MissingEntry { width: u32 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AnalyzeError>;

const EVAL_BATCH: usize = 64;

/// Classification accuracy of the SNN plus its pooled spiking activity.
pub fn evaluate_snn(snn: &SnnModel, data: &Dataset) -> Result<(f64, SpikingActivity)> {
    if data.is_empty() {
        return Err(AnalyzeError::Invalid("empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_BATCH).min(data.len());
        let x = data.images.slice_batch(start, end)?;
        let trace = run_snn(snn, &x, Scheduler::LayerByLayer)?;
        correct += trace
            .logits
            .argmax_rows()
            .iter()
            .zip(&data.labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
        parts.push(spiking_activity(&trace));
        start = end;
    }
    let activity = SpikingActivity::merge(&parts).expect("at least one batch");
    Ok((correct as f64 / data.len() as f64, activity))
}

/// SNN accuracy of the modified conversion at each `T`, next to the ANN.
pub fn accuracy_sweep(ann: &AnnModel, data: &Dataset, timesteps: &[u32]) -> Result<Vec<SweepPoint>> {
    let ann_accuracy = crate::trainer::accuracy(ann, data)
        .map_err(|e| AnalyzeError::Invalid(e.to_string()))?;
    timesteps
        .iter()
        .map(|&t| {
            let snn = convert(ann, t, false)?;
            let (snn_accuracy, _) = evaluate_snn(&snn, data)?;
            Ok(SweepPoint {
                timesteps: t,
                snn_accuracy,
                ann_accuracy,
            })
        })
        .collect()
}
