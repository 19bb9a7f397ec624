//! Bit-level ℓ1 activity penalty and its surrogate gradient.

use crate::ann::qcfs::GRID_TOL;
use crate::ann::{AnnError, QcfsActivation};
use crate::tensor::{self, Tensor, TensorError};

/// Total number of set bits over the integer levels of `a`.
pub fn count_bits(a: &Tensor, lambda: f32, q_steps: u32) -> tensor::Result<u64> {
    let scale = q_steps as f64 / lambda as f64;
    let mut total = 0u64;
    for (i, &v) in a.data().iter().enumerate() {
        let x = v as f64 * scale;
        let code = x.round();
        if (x - code).abs() > GRID_TOL || code < 0.0 || code > q_steps as f64 {
            return Err(TensorError::Invalid {
                op: "count_bits",
                msg: format!("value {v} at index {i} is not on the grid of step {}", 1.0 / scale),
            });
        }
        total += (code as u64).count_ones() as u64;
    }
    Ok(total)
}

/// `coeff · Σ_l Σ_t Σ_i bit_t(a_i^l)` over the given block activations.
pub fn sparsity_loss(
    activations: &[Tensor],
    acts: &[QcfsActivation],
    coeff: f64,
) -> Result<f64, AnnError> {
    if activations.len() != acts.len() {
        return Err(AnnError::Invalid(format!(
            "{} activations for {} blocks",
            activations.len(),
            acts.len()
        )));
    }
    let mut bits = 0u64;
    for (a, act) in activations.iter().zip(acts) {
        bits += count_bits(a, act.lambda, act.q_steps)?;
    }
    Ok(coeff * bits as f64)
}

/// Surrogate derivative of the penalty with respect to one activation:
/// each of the T bits contributes `coeff` while `0 < a < λ`.
pub fn sparsity_grad(a: f32, lambda: f32, timesteps: u32, coeff: f32) -> f32 {
    if a > 0.0 && a < lambda {
        coeff * timesteps as f32
    } else {
        0.0
    }
}
