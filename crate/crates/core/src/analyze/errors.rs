//! Per-layer split of the ANN/SNN mismatch into quantization, clipping and
//! deviation components.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AnalyzeError, Result};
use crate::ann::{qcfs, AnnModel};
use crate::convert::{NeuronModel, SnnModel};
use crate::snn::{fire_baseline, run_snn, LayerTrace, Scheduler};
use crate::tensor::{Scalar, Tensor};

/// Expected quantization error of a T-step rate code with threshold θ:
/// `θ/(4T)`.
pub fn expected_quantization_error(theta: f64, timesteps: u32) -> f64 {
    theta / (4.0 * timesteps as f64)
}

/// Which ANN output the SNN rates are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// QCFS output with the ceiling at `(Q−1)λ/Q`.
    Quantized,
    /// `max(0, z)` of the ANN pre-activation.
    FloatRelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerErrors {
    pub layer: usize,
    pub theta: f64,
    pub expected_quantization: f64,
    /// Mean `|ref − φ|` over entries with `0 < ref < ceiling`.
    pub quantization: f64,
    /// Mean `max(0, ref − ceiling)` over all entries.
    pub clipping: f64,
    /// Baseline: mean `|(u(T) − u(0))/T|`. Modified: mean `|φ − S_T(h)|`
    /// where `S_T` quantizes the accumulated current `h` to `2^T` levels.
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub timesteps: u32,
    pub reference: Reference,
    pub baseline: Vec<LayerErrors>,
    pub modified: Vec<LayerErrors>,
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn layer_errors<S: Scalar>(
    layer: usize,
    reference: &Tensor<S>,
    trace: &LayerTrace<S>,
    theta: f64,
    timesteps: u32,
    neuron: NeuronModel,
) -> LayerErrors {
    let ceiling = match neuron {
        NeuronModel::Baseline => theta,
        NeuronModel::Modified => theta * (1.0 - f64::powi(0.5, timesteps as i32)),
    };
    let (mut q_sum, mut q_n, mut c_sum) = (0.0, 0usize, 0.0);
    for (&r, &phi) in reference.data().iter().zip(trace.rate.data()) {
        let (r, phi) = (r.as_f64(), phi.as_f64());
        if r > 0.0 && r < ceiling {
            q_sum += (r - phi).abs();
            q_n += 1;
        }
        c_sum += (r - ceiling).max(0.0);
    }
    let t = timesteps as f64;
    let deviation = match neuron {
        NeuronModel::Baseline => trace
            .final_potential
            .data()
            .iter()
            .zip(trace.initial_potential.data())
            .map(|(&u, &u0)| ((u.as_f64() - u0.as_f64()) / t).abs())
            .sum::<f64>(),
        NeuronModel::Modified => {
            let levels = 1u32 << timesteps;
            trace
                .mean_current
                .data()
                .iter()
                .zip(trace.rate.data())
                .map(|(&zbar, &phi)| {
                    let h = zbar.as_f64() * t;
                    let code = qcfs::level(h, theta, levels, levels - 1);
                    (phi.as_f64() - theta * code as f64 / levels as f64).abs()
                })
                .sum::<f64>()
        }
    };
    LayerErrors {
        layer,
        theta,
        expected_quantization: expected_quantization_error(theta, timesteps),
        quantization: mean(q_sum, q_n),
        clipping: mean(c_sum, reference.numel()),
        deviation: mean(deviation, reference.numel()),
    }
}

/// Runs the ANN and both SNNs on `inputs` and reports the three error
/// components per block for each neuron model.
pub fn decompose_errors<S: Scalar>(
    ann: &AnnModel,
    baseline: &SnnModel,
    modified: &SnnModel,
    inputs: &Tensor<S>,
    reference: Reference,
) -> Result<ErrorDecomposition> {
    if baseline.neuron != NeuronModel::Baseline || modified.neuron != NeuronModel::Modified {
        return Err(AnalyzeError::Invalid(
            "expected one baseline and one modified SNN".into(),
        ));
    }
    if baseline.timesteps != modified.timesteps {
        return Err(AnalyzeError::Invalid(format!(
            "time steps differ: {} vs {}",
            baseline.timesteps, modified.timesteps
        )));
    }
    let t = modified.timesteps;
    let exact = ann.with_exact_clip();
    let a = exact.forward(inputs)?;
    let refs: Vec<Tensor<S>> = match reference {
        Reference::Quantized => a.activations,
        Reference::FloatRelu => a
            .pre_activations
            .iter()
            .map(|z| z.map(|v| v.max(S::zero())))
            .collect(),
    };
    let mut out = ErrorDecomposition {
        timesteps: t,
        reference,
        baseline: Vec::new(),
        modified: Vec::new(),
    };
    for (snn, sink) in [(baseline, &mut out.baseline), (modified, &mut out.modified)] {
        let trace = run_snn(snn, inputs, Scheduler::LayerByLayer)?;
        for (l, (r, layer)) in refs.iter().zip(&trace.layers).enumerate() {
            sink.push(layer_errors(
                l,
                r,
                layer,
                snn.thresholds[l] as f64,
                t,
                snn.neuron,
            ));
        }
    }
    Ok(out)
}

/// Mean `|z − φ|` of single baseline IF neurons driven by a constant current
/// `z ~ U[0, θ)` for T steps from `u(0) = θ/2`.
pub fn uniform_drive_quantization_error(
    theta: f64,
    timesteps: u32,
    samples: usize,
    rng: &mut impl Rng,
) -> f64 {
    let mut total = 0.0;
    for _ in 0..samples {
        let z: f64 = rng.random_range(0.0..theta);
        let trace = fire_baseline(&vec![z; timesteps as usize], theta, theta / 2.0);
        total += (z - trace.rate(theta)).abs();
    }
    total / samples.max(1) as f64
}
