//! ANN → SNN conversion: copy every parameter, set each firing threshold to
//! the source QCFS threshold, and split the BN bias across time steps so the
//! per-step currents add up to the ANN pre-activation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ann::{AnnError, AnnModel, ConvBnBlock};
use crate::snn::{self, Scheduler, SnnError};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum ConvertError {
    #[error(transparent)]
    Ann(#[from] AnnError),
    #[error(transparent)]
    Snn(#[from] SnnError),
    #[error("exact conversion needs T = log2(Q) = {expected}, got T = {got}")]
    TimestepMismatch { expected: u32, got: u32 },
    #[error("invalid conversion: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConvertError>;

/// Which integrate-and-fire dynamics an [`SnnModel`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronModel {
    /// Bit-serial neuron with halving thresholds; spike t is bit t of the
    /// quantized activation.
    Modified,
    /// Reset-by-subtraction IF neuron with a constant threshold.
    Baseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnnModel {
    /// Copied source network. In modified mode every block after the first
    /// holds the shifted bias β_c in its `beta` field.
    pub network: AnnModel,
    /// Per-block firing threshold θ.
    pub thresholds: Vec<f32>,
    pub timesteps: u32,
    pub neuron: NeuronModel,
}

impl SnnModel {
    pub fn new(
        network: AnnModel,
        thresholds: Vec<f32>,
        timesteps: u32,
        neuron: NeuronModel,
    ) -> std::result::Result<Self, AnnError> {
        network.validate()?;
        if thresholds.len() != network.num_blocks() {
            return Err(AnnError::Invalid(format!(
                "{} thresholds for {} blocks",
                thresholds.len(),
                network.num_blocks()
            )));
        }
        if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(AnnError::Invalid(format!("threshold {t} must be positive")));
        }
        let max_t = match neuron {
            NeuronModel::Modified => network.q_steps().trailing_zeros(),
            NeuronModel::Baseline => 1 << 16,
        };
        if timesteps == 0 || timesteps > max_t {
            return Err(AnnError::Invalid(format!(
                "time steps must be in 1..={max_t}, got {timesteps}"
            )));
        }
        Ok(Self {
            network,
            thresholds,
            timesteps,
            neuron,
        })
    }

    /// Modified neuron with one spike per activation bit.
    pub fn is_exact(&self) -> bool {
        self.neuron == NeuronModel::Modified
            && self.timesteps == self.network.q_steps().trailing_zeros()
    }
}

/// `β_c = β/T + (1 − 1/T)·γμ/σ`, evaluated in f64 and rounded once to `S`.
pub fn shift_bn_bias<S: Scalar>(
    beta: &[f32],
    gamma: &[f32],
    mu: &[f32],
    sigma: &[f32],
    timesteps: u32,
) -> Result<Vec<S>> {
    let c = beta.len();
    if gamma.len() != c || mu.len() != c || sigma.len() != c {
        return Err(ConvertError::Invalid(format!(
            "channel mismatch: beta {c}, gamma {}, mu {}, sigma {}",
            gamma.len(),
            mu.len(),
            sigma.len()
        )));
    }
    if timesteps == 0 {
        return Err(ConvertError::Invalid("time steps must be at least 1".into()));
    }
    let t = timesteps as f64;
    (0..c)
        .map(|i| {
            if !(sigma[i] > 0.0) {
                return Err(ConvertError::Invalid(format!(
                    "sigma[{i}] = {} must be positive",
                    sigma[i]
                )));
            }
            let (b, g, m, s) = (beta[i] as f64, gamma[i] as f64, mu[i] as f64, sigma[i] as f64);
            Ok(S::from_f64(b / t + (1.0 - 1.0 / t) * g * m / s))
        })
        .collect()
}

/// Converts to the modified-neuron SNN. With `exact` set, T must equal
/// log2(Q); otherwise any `1 <= T <= log2(Q)` is accepted and the result
/// carries the reduced-resolution error.
pub fn convert(ann: &AnnModel, timesteps: u32, exact: bool) -> Result<SnnModel> {
    ann.validate()?;
    let bits = ann.q_steps().trailing_zeros();
    if exact && timesteps != bits {
        return Err(ConvertError::TimestepMismatch {
            expected: bits,
            got: timesteps,
        });
    }
    let mut network = ann.clone();
    for (i, b) in network.blocks_mut().enumerate() {
        // the first block runs once on the analog input
        if i > 0 {
            b.beta = shift_bn_bias(&b.beta, &b.gamma, &b.mu, &b.sigma, timesteps)?;
        }
    }
    let thresholds = ann.blocks().map(|b| b.activation.lambda).collect();
    Ok(SnnModel::new(network, thresholds, timesteps, NeuronModel::Modified)?)
}

/// Converts to the baseline IF SNN: parameters and biases copied unchanged,
/// θ = λ.
pub fn convert_baseline(ann: &AnnModel, timesteps: u32) -> Result<SnnModel> {
    let thresholds = ann.blocks().map(|b| b.activation.lambda).collect();
    Ok(SnnModel::new(
        ann.clone(),
        thresholds,
        timesteps,
        NeuronModel::Baseline,
    )?)
}

fn condition_i_deviation<S: Scalar>(
    block: &ConvBnBlock,
    beta_c: &[S],
    planes: &[Tensor<S>],
) -> Result<f64> {
    let mut summed: Option<Tensor<S>> = None;
    let mut combined: Option<Tensor<S>> = None;
    for (k, s) in planes.iter().enumerate() {
        let x = s.scale(S::from_f64(f64::powi(2.0, k as i32)));
        let z = block.pre_activation_with_beta(&x, beta_c)?;
        match &mut summed {
            Some(acc) => acc.add_assign(&z).map_err(AnnError::from)?,
            None => summed = Some(z),
        }
        match &mut combined {
            Some(acc) => acc.add_assign(&x).map_err(AnnError::from)?,
            None => combined = Some(x),
        }
    }
    let (Some(summed), Some(combined)) = (summed, combined) else {
        return Ok(0.0);
    };
    let reference = block.pre_activation(&combined)?;
    Ok(summed.max_abs_diff(&reference).map_err(AnnError::from)?)
}

/// Worst elementwise `|Σ_t g_SNN(2^{t−1}s(t)) − g_ANN(Σ_t 2^{t−1}s(t))|` over
/// random binary spike planes of shape `[1, c, h, w]`. `block` carries the
/// source β; `beta_c` is the bias the spiking block uses.
pub fn check_condition_i<S: Scalar>(
    block: &ConvBnBlock,
    beta_c: &[S],
    input_hw: [usize; 2],
    timesteps: u32,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let shape = [1, block.in_channels(), input_hw[0], input_hw[1]];
    let n: usize = shape.iter().product();
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let planes: Vec<Tensor<S>> = (0..timesteps)
            .map(|_| {
                let data = (0..n)
                    .map(|_| if rng.random::<bool>() { S::one() } else { S::zero() })
                    .collect();
                Tensor::new(shape.to_vec(), data).expect("plane shape")
            })
            .collect();
        worst = worst.max(condition_i_deviation(block, beta_c, &planes)?);
    }
    Ok(worst)
}

/// Same deviation as [`check_condition_i`], taken over every one of the
/// `2^(n·T)` spike patterns. Refuses patterns spaces above 2^20.
pub fn check_condition_i_exhaustive<S: Scalar>(
    block: &ConvBnBlock,
    beta_c: &[S],
    input_hw: [usize; 2],
    timesteps: u32,
) -> Result<f64> {
    let shape = [1, block.in_channels(), input_hw[0], input_hw[1]];
    let n: usize = shape.iter().product();
    let bits = n * timesteps as usize;
    if bits > 20 {
        return Err(ConvertError::Invalid(format!(
            "2^{bits} patterns is too many to enumerate"
        )));
    }
    let mut worst = 0.0f64;
    for pattern in 0u64..(1 << bits) {
        let planes: Vec<Tensor<S>> = (0..timesteps as usize)
            .map(|t| {
                let data = (0..n)
                    .map(|i| {
                        if (pattern >> (t * n + i)) & 1 == 1 {
                            S::one()
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                Tensor::new(shape.to_vec(), data).expect("plane shape")
            })
            .collect();
        worst = worst.max(condition_i_deviation(block, beta_c, &planes)?);
    }
    Ok(worst)
}

/// Outcome of running an ANN and its converted SNN side by side.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LosslessReport {
    /// Per block: worst `|a − Σ_t s(t)·θ/2^t|`.
    pub layer_max_deviation: Vec<f64>,
    /// Per block: number of spike entries that differ from the ANN bit.
    /// Only counted when the SNN is in exact mode.
    pub layer_bit_mismatches: Vec<usize>,
    pub logit_max_deviation: f64,
    pub max_deviation: f64,
    pub samples: usize,
}

impl LosslessReport {
    pub fn bits_equal(&self) -> bool {
        self.layer_bit_mismatches.iter().all(|&m| m == 0)
    }

    fn merge(&mut self, other: &LosslessReport) {
        if self.layer_max_deviation.is_empty() {
            self.layer_max_deviation = vec![0.0; other.layer_max_deviation.len()];
            self.layer_bit_mismatches = vec![0; other.layer_bit_mismatches.len()];
        }
        for (a, b) in self.layer_max_deviation.iter_mut().zip(&other.layer_max_deviation) {
            *a = a.max(*b);
        }
        for (a, b) in self.layer_bit_mismatches.iter_mut().zip(&other.layer_bit_mismatches) {
            *a += b;
        }
        self.logit_max_deviation = self.logit_max_deviation.max(other.logit_max_deviation);
        self.max_deviation = self.max_deviation.max(other.max_deviation);
        self.samples += other.samples;
    }
}

/// Runs the quantized ANN (ceiling at Q−1 levels) and the SNN on `inputs`
/// and compares every block output and the logits.
pub fn verify_lossless<S: Scalar>(
    ann: &AnnModel,
    snn: &SnnModel,
    inputs: &Tensor<S>,
) -> Result<LosslessReport> {
    if snn.neuron != NeuronModel::Modified {
        return Err(ConvertError::Invalid(
            "lossless verification needs the modified neuron".into(),
        ));
    }
    let reference = ann.with_exact_clip();
    let mut report = LosslessReport::default();
    for i in 0..inputs.batch() {
        let x = inputs.sample(i).map_err(AnnError::from)?;
        report.merge(&verify_sample(&reference, snn, &x)?);
    }
    Ok(report)
}

fn verify_sample<S: Scalar>(ann: &AnnModel, snn: &SnnModel, x: &Tensor<S>) -> Result<LosslessReport> {
    let a = ann.forward(x)?;
    let s = snn::run_snn(snn, x, Scheduler::LayerByLayer)?;
    let mut report = LosslessReport {
        samples: x.batch(),
        ..Default::default()
    };
    for (l, (act, layer)) in a.activations.iter().zip(&s.layers).enumerate() {
        let dev = act.max_abs_diff(&layer.rate).map_err(AnnError::from)?;
        report.layer_max_deviation.push(dev);
        let mismatches = if snn.is_exact() {
            let block = ann.blocks().nth(l).expect("block count");
            let bits = block.activation.bit_planes(act, snn.timesteps)?;
            bits.iter()
                .zip(&layer.spikes)
                .map(|(b, p)| b.data().iter().zip(p.data()).filter(|(x, y)| x != y).count())
                .sum()
        } else {
            0
        };
        report.layer_bit_mismatches.push(mismatches);
    }
    report.logit_max_deviation = a.logits.max_abs_diff(&s.logits).map_err(AnnError::from)?;
    report.max_deviation = report
        .layer_max_deviation
        .iter()
        .copied()
        .fold(report.logit_max_deviation, f64::max);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shift_examples() {
        let b: Vec<f64> = shift_bn_bias(&[0.8], &[1.0], &[0.2], &[1.0], 4).unwrap();
        assert!((b[0] - 0.35).abs() < 1e-7);
        let same: Vec<f32> = shift_bn_bias(&[0.3, -1.2], &[0.7, 2.0], &[0.5, 0.1], &[1.3, 0.4], 1).unwrap();
        assert_eq!(same, vec![0.3, -1.2]);
        assert_eq!(shift_bn_bias::<f32>(&[0.0], &[3.0], &[0.0], &[2.0], 4).unwrap(), vec![0.0]);
        assert!(shift_bn_bias::<f32>(&[0.0], &[1.0], &[0.0], &[0.0], 4).is_err());
    }

    fn model(seed: u64) -> AnnModel {
        Architecture::new([2, 8, 8], vec![4, 4, 3], 5, 16)
            .random(&mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap()
    }

    #[test]
    fn convert_only_touches_hidden_betas() {
        let ann = model(1);
        let before = ann.clone();
        let snn = convert(&ann, 4, true).unwrap();
        assert_eq!(ann, before);
        assert_eq!(snn.network.head, ann.head);
        for (i, (a, s)) in ann.blocks().zip(snn.network.blocks()).enumerate() {
            assert_eq!(a.weight, s.weight);
            assert_eq!((&a.mu, &a.sigma, &a.gamma), (&s.mu, &s.sigma, &s.gamma));
            assert_eq!(a.activation, s.activation);
            if i == 0 {
                assert_eq!(a.beta, s.beta);
            } else {
                assert_ne!(a.beta, s.beta);
            }
        }
        let lambdas: Vec<f32> = ann.blocks().map(|b| b.activation.lambda).collect();
        assert_eq!(snn.thresholds, lambdas);
    }

    #[test]
    fn t1_conversion_keeps_betas() {
        let mut arch = Architecture::new([1, 4, 4], vec![2, 2], 2, 2);
        arch.clip_hi = 1;
        let ann = arch.random(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let snn = convert(&ann, 1, true).unwrap();
        assert_eq!(snn.network, ann);
    }

    #[test]
    fn exact_mode_rejects_wrong_t() {
        let ann = model(3);
        assert!(matches!(
            convert(&ann, 3, true),
            Err(ConvertError::TimestepMismatch { expected: 4, got: 3 })
        ));
        assert!(convert(&ann, 3, false).is_ok());
        assert!(convert(&ann, 5, false).is_err());
    }

    #[test]
    fn condition_i_holds_after_shift_and_fails_without() {
        let ann = model(4);
        let block = ann.blocks().nth(1).unwrap();
        let shifted: Vec<f64> = shift_bn_bias(&block.beta, &block.gamma, &block.mu, &block.sigma, 4).unwrap();
        let beta: Vec<f64> = block.beta.iter().map(|&b| b as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dev = check_condition_i(block, &shifted, [8, 8], 4, 20, &mut rng).unwrap();
        assert!(dev < 1e-8, "{dev}");
        let dev1 = check_condition_i(block, &beta, [8, 8], 1, 5, &mut rng).unwrap();
        assert!(dev1 < 1e-12);
        let bad = check_condition_i(block, &beta, [8, 8], 4, 5, &mut rng).unwrap();
        assert!(bad > 1e-2, "{bad}");
    }
}
