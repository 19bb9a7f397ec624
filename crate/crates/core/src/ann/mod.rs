//! Source network: conv → batch norm → QCFS blocks, optional average pools,
//! and a linear classifier head that produces logits without an activation.

pub mod checkpoint;
pub mod qcfs;

pub use qcfs::QcfsActivation;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AnnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("value {value} at index {index} is not on the activation grid (step {step})")]
    OffGrid { index: usize, value: f64, step: f64 },
}

pub type Result<T> = std::result::Result<T, AnnError>;

pub(crate) fn cast_slice<S: Scalar>(v: &[f32]) -> Vec<S> {
    v.iter().map(|&x| S::from_f32(x)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnBlock {
    /// `[c_out, c_in, k, k]`.
    pub weight: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub mu: Vec<f32>,
    /// Stored standard deviation, epsilon already included.
    pub sigma: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub activation: QcfsActivation,
}

impl ConvBnBlock {
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn validate(&self) -> Result<()> {
        let s = self.weight.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(AnnError::Invalid(format!(
                "conv weight must be [out, in, k, k], got {s:?}"
            )));
        }
        let c = s[0];
        for (name, p) in [
            ("mu", &self.mu),
            ("sigma", &self.sigma),
            ("gamma", &self.gamma),
            ("beta", &self.beta),
        ] {
            if p.len() != c {
                return Err(AnnError::Invalid(format!(
                    "{name} has {} entries for {c} output channels",
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(AnnError::Invalid(format!("{name} contains non-finite values")));
            }
        }
        if let Some(i) = self.sigma.iter().position(|&v| !(v > 0.0)) {
            return Err(AnnError::Invalid(format!(
                "sigma[{i}] = {} must be positive",
                self.sigma[i]
            )));
        }
        if self.stride == 0 {
            return Err(AnnError::Invalid("stride must be positive".into()));
        }
        self.activation.validate()
    }

    /// `γ(W*x − μ)/σ + β` with this block's own β.
    pub fn pre_activation<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.pre_activation_with_beta(x, &cast_slice(&self.beta))
    }

    pub fn pre_activation_with_beta<S: Scalar>(&self, x: &Tensor<S>, beta: &[S]) -> Result<Tensor<S>> {
        let y = tensor::conv2d(x, &self.weight.cast(), self.stride, self.padding)?;
        Ok(tensor::batch_norm(
            &y,
            &cast_slice(&self.mu),
            &cast_slice(&self.sigma),
            &cast_slice(&self.gamma),
            beta,
        )?)
    }

    fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if input[0] != self.in_channels() {
            return Err(AnnError::Invalid(format!(
                "block expects {} input channels, got {}",
                self.in_channels(),
                input[0]
            )));
        }
        let k = self.kernel();
        let (h, w) = tensor::conv2d_output_hw(input[1], input[2], k, k, self.stride, self.padding)
            .ok_or_else(|| AnnError::Invalid(format!("kernel {k} does not fit input {input:?}")))?;
        Ok([self.out_channels(), h, w])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Block(ConvBnBlock),
    AvgPool(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// `[classes, features]`.
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl LinearHead {
    pub fn forward<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(tensor::linear(
            &tensor::flatten(x),
            &self.weight.cast(),
            &cast_slice(&self.bias),
        )?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnModel {
    pub layers: Vec<Layer>,
    pub head: LinearHead,
    /// `[channels, height, width]` of one sample.
    pub input_shape: [usize; 3],
}

/// Per-block intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct AnnTrace<S = f32> {
    pub logits: Tensor<S>,
    /// Pre-activation `z` of each block.
    pub pre_activations: Vec<Tensor<S>>,
    /// QCFS output `a` of each block.
    pub activations: Vec<Tensor<S>>,
}

impl AnnModel {
    pub fn new(layers: Vec<Layer>, head: LinearHead, input_shape: [usize; 3]) -> Result<Self> {
        let model = Self {
            layers,
            head,
            input_shape,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks().next().is_none() {
            return Err(AnnError::Invalid("model has no conv blocks".into()));
        }
        let q = self.q_steps();
        let mut shape = self.input_shape;
        for layer in &self.layers {
            shape = match layer {
                Layer::Block(b) => {
                    b.validate()?;
                    if b.activation.q_steps != q {
                        return Err(AnnError::Invalid(format!(
                            "mixed quantization steps {} and {q}",
                            b.activation.q_steps
                        )));
                    }
                    b.output_shape(shape)?
                }
                Layer::AvgPool(size) => {
                    if *size == 0 || !shape[1].is_multiple_of(*size) || !shape[2].is_multiple_of(*size) {
                        return Err(AnnError::Invalid(format!(
                            "pool {size} does not divide {}x{}",
                            shape[1], shape[2]
                        )));
                    }
                    [shape[0], shape[1] / size, shape[2] / size]
                }
            };
        }
        let features: usize = shape.iter().product();
        let hw = self.head.weight.shape();
        if hw.len() != 2 || hw[1] != features || self.head.bias.len() != hw[0] {
            return Err(AnnError::Invalid(format!(
                "head weight {hw:?} / bias {} incompatible with {features} features",
                self.head.bias.len()
            )));
        }
        Ok(())
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ConvBnBlock> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Block(b) => Some(b),
            Layer::AvgPool(_) => None,
        })
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBnBlock> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Block(b) => Some(b),
            Layer::AvgPool(_) => None,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks().count()
    }

    pub fn q_steps(&self) -> u32 {
        self.blocks().next().map_or(0, |b| b.activation.q_steps)
    }

    pub fn classes(&self) -> usize {
        self.head.weight.shape()[0]
    }

    /// Per-sample `[c, h, w]` output shape of every layer.
    pub fn layer_shapes(&self) -> Vec<[usize; 3]> {
        let mut shape = self.input_shape;
        self.layers
            .iter()
            .map(|layer| {
                shape = match layer {
                    Layer::Block(b) => b.output_shape(shape).expect("validated model"),
                    Layer::AvgPool(s) => [shape[0], shape[1] / s, shape[2] / s],
                };
                shape
            })
            .collect()
    }

    pub fn check_input<S: Scalar>(&self, x: &Tensor<S>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(AnnError::Invalid(format!(
                "input shape {s:?} does not match model input [N, {}, {}, {}]",
                self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        Ok(())
    }

    /// Forward pass returning logits and every block's `z` and `a`.
    pub fn forward<S: Scalar>(&self, x: &Tensor<S>) -> Result<AnnTrace<S>> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut pre_activations = Vec::new();
        let mut activations = Vec::new();
        for layer in &self.layers {
            h = match layer {
                Layer::Block(b) => {
                    let z = b.pre_activation(&h)?;
                    let a = b.activation.forward(&z);
                    pre_activations.push(z);
                    activations.push(a.clone());
                    a
                }
                Layer::AvgPool(size) => tensor::avgpool2d(&h, *size)?,
            };
        }
        let logits = self.head.forward(&h)?;
        Ok(AnnTrace {
            logits,
            pre_activations,
            activations,
        })
    }

    pub fn logits<S: Scalar>(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.forward(x)?.logits)
    }

    /// Copy of the model with every ceiling set to `Q-1` levels.
    pub fn with_exact_clip(&self) -> Self {
        let mut m = self.clone();
        for b in m.blocks_mut() {
            b.activation.clip_hi = b.activation.q_steps - 1;
        }
        m
    }
}

/// Layer plan for building a sequential model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: [usize; 3],
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Block indices (0-based) followed by a 2x2 average pool.
    #[serde(default)]
    pub pool_after: Vec<usize>,
    pub classes: usize,
    pub q_steps: u32,
    /// Ceiling level of every QCFS activation.
    pub clip_hi: u32,
    pub lambda_init: f32,
}

impl Architecture {
    pub fn new(input_shape: [usize; 3], channels: Vec<usize>, classes: usize, q_steps: u32) -> Self {
        Self {
            input_shape,
            channels,
            kernel: 3,
            pool_after: Vec::new(),
            classes,
            q_steps,
            clip_hi: q_steps.saturating_sub(1),
            lambda_init: 2.0,
        }
    }

    fn build(
        &self,
        mut block: impl FnMut(usize, usize, usize) -> Result<ConvBnBlock>,
        mut head: impl FnMut(usize, usize) -> LinearHead,
    ) -> Result<AnnModel> {
        let mut layers = Vec::new();
        let mut c_in = self.input_shape[0];
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for (i, &c_out) in self.channels.iter().enumerate() {
            layers.push(Layer::Block(block(i, c_in, c_out)?));
            c_in = c_out;
            if self.pool_after.contains(&i) {
                layers.push(Layer::AvgPool(2));
                h /= 2;
                w /= 2;
            }
        }
        AnnModel::new(layers, head(c_in * h * w, self.classes), self.input_shape)
    }

    /// Training initialization: Kaiming-normal weights, identity batch norm,
    /// every threshold at `lambda_init`.
    pub fn init(&self, rng: &mut impl Rng) -> Result<AnnModel> {
        let k = self.kernel;
        let act = QcfsActivation::new(self.lambda_init, self.q_steps, self.clip_hi)?;
        let mut weights = Vec::new();
        for (i, &c_out) in self.channels.iter().enumerate() {
            let c_in = if i == 0 { self.input_shape[0] } else { self.channels[i - 1] };
            let std = (2.0 / (c_in * k * k) as f64).sqrt();
            weights.push(normal_tensor(rng, &[c_out, c_in, k, k], std)?);
        }
        let mut weights = weights.into_iter();
        let feats = self.feature_count();
        let head_w = normal_tensor(rng, &[self.classes, feats], (1.0 / feats as f64).sqrt())?;
        self.build(
            |_, _, c_out| {
                Ok(ConvBnBlock {
                    weight: weights.next().expect("one weight per block"),
                    stride: 1,
                    padding: k / 2,
                    mu: vec![0.0; c_out],
                    sigma: vec![1.0; c_out],
                    gamma: vec![1.0; c_out],
                    beta: vec![0.0; c_out],
                    activation: act,
                })
            },
            |_, classes| LinearHead {
                weight: head_w.clone(),
                bias: vec![0.0; classes],
            },
        )
    }

    /// A model with generic random parameters everywhere (weights, BN
    /// statistics and affine terms, thresholds), for equivalence testing.
    pub fn random(&self, rng: &mut impl Rng) -> Result<AnnModel> {
        let k = self.kernel;
        let q = self.q_steps;
        let hi = self.clip_hi;
        let feats = self.feature_count();
        let mut blocks = Vec::new();
        for (i, &c_out) in self.channels.iter().enumerate() {
            let c_in = if i == 0 { self.input_shape[0] } else { self.channels[i - 1] };
            let std = (2.0 / (c_in * k * k) as f64).sqrt();
            let weight = normal_tensor(rng, &[c_out, c_in, k, k], std)?;
            let u = |rng: &mut dyn rand::RngCore, lo: f32, hi: f32| -> Vec<f32> {
                (0..c_out).map(|_| rng.random_range(lo..hi)).collect()
            };
            blocks.push(ConvBnBlock {
                weight,
                stride: 1,
                padding: k / 2,
                mu: u(rng, -0.3, 0.3),
                sigma: u(rng, 0.5, 1.5),
                gamma: u(rng, 0.5, 1.5),
                beta: u(rng, -0.2, 0.5),
                activation: QcfsActivation::new(rng.random_range(0.5f32..2.0), q, hi)?,
            });
        }
        let head_w = normal_tensor(rng, &[self.classes, feats], (1.0 / feats as f64).sqrt())?;
        let head_b: Vec<f32> = (0..self.classes).map(|_| rng.random_range(-0.1..0.1)).collect();
        let mut blocks = blocks.into_iter();
        self.build(
            |_, _, _| Ok(blocks.next().expect("one block per entry")),
            |_, _| LinearHead {
                weight: head_w.clone(),
                bias: head_b.clone(),
            },
        )
    }

    fn feature_count(&self) -> usize {
        let pools = self
            .pool_after
            .iter()
            .filter(|&&i| i < self.channels.len())
            .count();
        let div = 1usize << pools;
        self.channels.last().copied().unwrap_or(self.input_shape[0])
            * (self.input_shape[1] / div)
            * (self.input_shape[2] / div)
    }
}

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Result<Tensor> {
    let dist = Normal::new(0.0, std)
        .map_err(|e| AnnError::Invalid(format!("bad init scale {std}: {e}")))?;
    let n: usize = shape.iter().product();
    Ok(Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| dist.sample(rng) as f32).collect(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> Architecture {
        let mut a = Architecture::new([1, 8, 8], vec![4, 6], 3, 16);
        a.pool_after = vec![0];
        a
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = small_arch().random(&mut rng).unwrap();
        for b in m.blocks_mut() {
            b.weight = Tensor::zeros(b.weight.shape());
            b.beta.iter_mut().for_each(|v| *v = 0.0);
            b.mu.iter_mut().for_each(|v| *v = 0.0);
        }
        m.head.weight = Tensor::zeros(m.head.weight.shape());
        m.head.bias = vec![0.0; 3];
        let x = normal_tensor(&mut rng, &[2, 1, 8, 8], 1.0).unwrap();
        assert!(m.logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_block_passes_quantized_input() {
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let block = ConvBnBlock {
            weight: w,
            stride: 1,
            padding: 0,
            mu: vec![0.0],
            sigma: vec![1.0],
            gamma: vec![1.0],
            beta: vec![0.0],
            activation: QcfsActivation::exact(1.0, 16).unwrap(),
        };
        let mut head_w = vec![0.0; 4 * 4];
        for i in 0..4 {
            head_w[i * 4 + i] = 1.0;
        }
        let head = LinearHead {
            weight: Tensor::new(vec![4, 4], head_w).unwrap(),
            bias: vec![0.0; 4],
        };
        let m = AnnModel::new(vec![Layer::Block(block)], head, [1, 2, 2]).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.4, -0.3, 5.0, 0.5]).unwrap();
        assert_eq!(m.logits(&x).unwrap().data(), &[0.375, 0.0, 0.9375, 0.5]);
    }

    #[test]
    fn forward_matches_composition_of_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = small_arch().random(&mut rng).unwrap();
        let x = normal_tensor(&mut rng, &[3, 1, 8, 8], 1.0).unwrap();
        let mut h = x.clone();
        for layer in &m.layers {
            h = match layer {
                Layer::Block(b) => {
                    let y = tensor::conv2d(&h, &b.weight, b.stride, b.padding).unwrap();
                    let z = tensor::batch_norm(&y, &b.mu, &b.sigma, &b.gamma, &b.beta).unwrap();
                    b.activation.forward(&z)
                }
                Layer::AvgPool(s) => tensor::avgpool2d(&h, *s).unwrap(),
            };
        }
        let expect = tensor::linear(&tensor::flatten(&h), &m.head.weight, &m.head.bias).unwrap();
        assert_eq!(m.logits(&x).unwrap(), expect);
    }

    #[test]
    fn rejects_wrong_input_and_bad_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = small_arch().random(&mut rng).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 2, 8, 8]);
        assert!(m.logits(&x).is_err());
        let mut bad = m.clone();
        bad.head.bias.pop();
        assert!(bad.validate().is_err());
        let mut bad = m;
        if let Layer::Block(b) = &mut bad.layers[0] {
            b.sigma[0] = 0.0;
        }
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shapes_follow_pools() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = small_arch().init(&mut rng).unwrap();
        assert_eq!(m.layer_shapes(), vec![[4, 8, 8], [4, 4, 4], [6, 4, 4]]);
        assert_eq!(m.head.weight.shape(), &[3, 96]);
    }
}
