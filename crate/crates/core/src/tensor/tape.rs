//! Reverse-mode differentiation over a linear record of primitive
//! applications.
//!
//! Every primitive appends one node holding its output and whatever it needs
//! for the backward pass. `backward` walks the nodes in exact reverse order.

use super::ops::{avgpool2d_backward, conv2d_backward};
use super::{avgpool2d, conv2d, flatten, linear, Result, Tensor, TensorError};
use crate::ann::qcfs;
use crate::trainer::regularizer;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased variance (without epsilon).
    pub var: Vec<f32>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mu: Vec<f32>,
        sigma: Vec<f32>,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f32>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    AvgPool {
        input: Var,
        size: usize,
    },
    Reshape {
        input: Var,
    },
    Qcfs {
        input: Var,
        lambda: Var,
        q_steps: u32,
        clip_hi: u32,
    },
    SparsityPenalty {
        input: Var,
        lambda: f32,
        timesteps: u32,
        coeff: f32,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Scale(Var, f32),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Single-writer record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of the tape it came from.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn sum_scalar(t: &Tensor) -> f32 {
    t.data().iter().sum()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, var: Var) -> Result<&Node> {
        self.nodes
            .get(var.0)
            .ok_or_else(|| TensorError::Backward(format!("variable {} is not on this tape", var.0)))
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        Ok(&self.node(var)?.value)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = conv2d(self.value(input)?, self.value(weight)?, stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            },
        ))
    }

    /// Inference-form batch norm with fixed statistics.
    pub fn batch_norm(
        &mut self,
        input: Var,
        mu: &[f32],
        sigma: &[f32],
        gamma: Var,
        beta: Var,
    ) -> Result<Var> {
        let out = super::batch_norm(
            self.value(input)?,
            mu,
            sigma,
            self.value(gamma)?.data(),
            self.value(beta)?.data(),
        )?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mu: mu.to_vec(),
                sigma: sigma.to_vec(),
            },
        ))
    }

    /// Batch norm over batch statistics; the normalizer is
    /// `sqrt(var + eps)`, matching what gets stored as sigma.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, BatchStats)> {
        let x = self.value(input)?;
        if x.ndim() < 2 {
            return Err(TensorError::Invalid {
                op: "batch_norm_train",
                msg: format!("input must be at least rank 2, got {:?}", x.shape()),
            });
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let inner: usize = x.shape()[2..].iter().product();
        let g = self.value(gamma)?.data().to_vec();
        let b = self.value(beta)?.data().to_vec();
        if g.len() != c || b.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm_train",
                lhs: x.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        let m = (n * inner) as f64;
        let xd = x.data();
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for bi in 0..n {
                let base = (bi * c + ch) * inner;
                s += xd[base..base + inner].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mu = s / m;
            let mut sq = 0.0f64;
            for bi in 0..n {
                let base = (bi * c + ch) * inner;
                sq += xd[base..base + inner]
                    .iter()
                    .map(|&v| (v as f64 - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = mu as f32;
            var[ch] = (sq / m) as f32;
        }
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let shape = x.shape().to_vec();
        let var_out = self.push(
            Tensor::from_parts(shape.clone(), out),
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat: Tensor::from_parts(shape, xhat),
                inv_std,
            },
        );
        Ok((var_out, BatchStats { mean, var }))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = linear(
            self.value(input)?,
            self.value(weight)?,
            self.value(bias)?.data(),
        )?;
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn avgpool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let out = avgpool2d(self.value(input)?, size)?;
        Ok(self.push(out, Op::AvgPool { input, size }))
    }

    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let out = flatten(self.value(input)?);
        Ok(self.push(out, Op::Reshape { input }))
    }

    /// QCFS activation with a trainable scalar threshold `lambda` (shape `[1]`).
    pub fn qcfs(&mut self, input: Var, lambda: Var, q_steps: u32, clip_hi: u32) -> Result<Var> {
        let lam = self.scalar_value(lambda)?;
        let out = qcfs::forward_values(self.value(input)?, lam, q_steps, clip_hi)?;
        Ok(self.push(
            out,
            Op::Qcfs {
                input,
                lambda,
                q_steps,
                clip_hi,
            },
        ))
    }

    /// Bit-level l1 penalty on a QCFS output. The forward value is the exact
    /// weighted bit count; the backward pass injects the surrogate gradient.
    pub fn sparsity_penalty(
        &mut self,
        activation: Var,
        lambda: f32,
        q_steps: u32,
        coeff: f32,
    ) -> Result<Var> {
        let timesteps = q_steps.trailing_zeros();
        let a = self.value(activation)?;
        let bits = regularizer::count_bits(a, lambda, q_steps)?;
        let value = Tensor::scalar(coeff * bits as f32);
        Ok(self.push(
            value,
            Op::SparsityPenalty {
                input: activation,
                lambda,
                timesteps,
                coeff,
            },
        ))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits)?;
        if z.ndim() != 2 || z.shape()[0] != labels.len() {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("logits {:?} vs {} labels", z.shape(), labels.len()),
            });
        }
        let (n, k) = (z.shape()[0], z.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("label {bad} out of range for {k} classes"),
            });
        }
        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f64;
        for (b, &label) in labels.iter().enumerate() {
            let row = &z.data()[b * k..(b + 1) * k];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let denom: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            for j in 0..k {
                probs[b * k + j] = ((row[j] as f64 - max).exp() / denom) as f32;
            }
            loss += denom.ln() + max - row[label] as f64;
        }
        let value = Tensor::scalar((loss / n as f64) as f32);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: Tensor::from_parts(vec![n, k], probs),
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.add(self.value(b)?)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a)?.zip_map(self.value(b)?, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(sum_scalar(self.value(a)?));
        Ok(self.push(out, Op::Sum(a)))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let out = self.value(a)?.scale(factor);
        Ok(self.push(out, Op::Scale(a, factor)))
    }

    fn scalar_value(&self, var: Var) -> Result<f32> {
        let t = self.value(var)?;
        if t.numel() != 1 {
            return Err(TensorError::Invalid {
                op: "scalar",
                msg: format!("expected a single element, got shape {:?}", t.shape()),
            });
        }
        Ok(t.data()[0])
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(TensorError::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].clone() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, g: Tensor| -> Result<()> {
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => {
                        *slot = Some(g);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    stride,
                    padding,
                } => {
                    let (gx, gw) = conv2d_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[weight.0].value,
                        &gy,
                        *stride,
                        *padding,
                    )?;
                    acc(*input, gx)?;
                    acc(*weight, gw)?;
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    mu,
                    sigma,
                } => {
                    let x = &self.nodes[input.0].value;
                    let g = self.nodes[gamma.0].value.data();
                    let (n, c) = (x.shape()[0], x.shape()[1]);
                    let inner = x.numel() / (n * c).max(1);
                    let mut gx = vec![0.0f32; x.numel()];
                    let mut gg = vec![0.0f32; c];
                    let mut gb = vec![0.0f32; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            let (dy, xs) = (&gy.data()[base..base + inner], &x.data()[base..base + inner]);
                            for ((out, &d), &xv) in gx[base..base + inner].iter_mut().zip(dy).zip(xs) {
                                *out = d * g[ch] / sigma[ch];
                                gg[ch] += d * ((xv - mu[ch]) / sigma[ch]);
                                gb[ch] += d;
                            }
                        }
                    }
                    acc(*input, Tensor::from_parts(x.shape().to_vec(), gx))?;
                    acc(*gamma, Tensor::from_parts(vec![c], gg))?;
                    acc(*beta, Tensor::from_parts(vec![c], gb))?;
                }
                Op::BatchNormTrain {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let g = self.nodes[gamma.0].value.data();
                    let shape = xhat.shape().to_vec();
                    let (n, c) = (shape[0], shape[1]);
                    let inner = xhat.numel() / (n * c).max(1);
                    let m = (n * inner) as f32;
                    let mut gg = vec![0.0f32; c];
                    let mut gb = vec![0.0f32; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            for i in base..base + inner {
                                gg[ch] += gy.data()[i] * xhat.data()[i];
                                gb[ch] += gy.data()[i];
                            }
                        }
                    }
                    // dx = gamma * inv_std / m * (m*dy - sum(dy) - xhat*sum(dy*xhat))
                    let mut gx = vec![0.0f32; xhat.numel()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            let k = g[ch] * inv_std[ch] / m;
                            let (dy, xh) = (&gy.data()[base..base + inner], &xhat.data()[base..base + inner]);
                            for ((out, &d), &h) in gx[base..base + inner].iter_mut().zip(dy).zip(xh) {
                                *out = k * (m * d - gb[ch] - h * gg[ch]);
                            }
                        }
                    }
                    acc(*input, Tensor::from_parts(shape, gx))?;
                    acc(*gamma, Tensor::from_parts(vec![c], gg))?;
                    acc(*beta, Tensor::from_parts(vec![c], gb))?;
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let x = &self.nodes[input.0].value;
                    let w = &self.nodes[weight.0].value;
                    let (n, f) = (x.shape()[0], x.shape()[1]);
                    let o = w.shape()[0];
                    let mut gx = vec![0.0f32; n * f];
                    let mut gw = vec![0.0f32; o * f];
                    let mut gb = vec![0.0f32; o];
                    for b in 0..n {
                        for j in 0..o {
                            let d = gy.data()[b * o + j];
                            gb[j] += d;
                            for k in 0..f {
                                gx[b * f + k] += d * w.data()[j * f + k];
                                gw[j * f + k] += d * x.data()[b * f + k];
                            }
                        }
                    }
                    acc(*input, Tensor::from_parts(vec![n, f], gx))?;
                    acc(*weight, Tensor::from_parts(vec![o, f], gw))?;
                    acc(*bias, Tensor::from_parts(vec![o], gb))?;
                }
                Op::AvgPool { input, size } => {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    acc(*input, avgpool2d_backward(&shape, &gy, *size))?;
                }
                Op::Reshape { input } => {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    acc(*input, Tensor::from_parts(shape, gy.into_data()))?;
                }
                Op::Qcfs {
                    input,
                    lambda,
                    q_steps,
                    clip_hi,
                } => {
                    let z = &self.nodes[input.0].value;
                    let lam = self.nodes[lambda.0].value.data()[0];
                    let (gz, glam) = qcfs::backward_values(z, lam, *q_steps, *clip_hi, &gy)?;
                    acc(*input, gz)?;
                    acc(*lambda, Tensor::scalar(glam))?;
                }
                Op::SparsityPenalty {
                    input,
                    lambda,
                    timesteps,
                    coeff,
                } => {
                    let a = &self.nodes[input.0].value;
                    let up = gy.data()[0];
                    let g = a.map(|v| up * regularizer::sparsity_grad(v, *lambda, *timesteps, *coeff));
                    acc(*input, g)?;
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let up = gy.data()[0];
                    let (n, k) = (probs.shape()[0], probs.shape()[1]);
                    let mut g = probs.data().to_vec();
                    for (b, &l) in labels.iter().enumerate() {
                        g[b * k + l] -= 1.0;
                    }
                    let scale = up / n as f32;
                    g.iter_mut().for_each(|v| *v *= scale);
                    acc(*logits, Tensor::from_parts(vec![n, k], g))?;
                }
                Op::Add(a, b) => {
                    acc(*a, gy.clone())?;
                    acc(*b, gy)?;
                }
                Op::Mul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    acc(*a, gy.zip_map(vb, "mul_backward", |g, y| g * y)?)?;
                    acc(*b, gy.zip_map(va, "mul_backward", |g, x| g * x)?)?;
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    acc(*a, Tensor::full(&shape, gy.data()[0]))?;
                }
                Op::Scale(a, factor) => {
                    acc(*a, gy.scale(*factor))?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}
