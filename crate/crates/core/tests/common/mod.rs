//! Helpers shared by the integration tests: random models and inputs, and
//! float64 finite-difference oracles for the tape gradients.
#![allow(dead_code)]

use bitspike::ann::{AnnModel, Architecture};
use bitspike::tensor::{self, Tape, Tensor, Var};
use bitspike::trainer::{gen_synthetic, train, Dataset, History, RegularizerConfig, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// 2–4 blocks of 1–16 channels on 3×8×8 inputs, Q = 16, generic parameters.
pub fn random_model(rng: &mut impl Rng) -> AnnModel {
    let blocks = rng.random_range(2..=4);
    let channels = (0..blocks).map(|_| rng.random_range(1..=16)).collect();
    let mut arch = Architecture::new([3, 8, 8], channels, 10, 16);
    if rng.random::<bool>() {
        arch.pool_after = vec![rng.random_range(0..blocks)];
    }
    arch.random(rng).unwrap()
}

/// `‖a − b‖₂ / ‖b‖₂`, with `b` the reference.
pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Central differences of `f` at every entry of `params[which]`.
pub fn finite_difference(
    params: &[Vec<f64>],
    which: usize,
    h: f64,
    f: &dyn Fn(&[Vec<f64>]) -> f64,
) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params[which].len())
        .map(|i| {
            let x0 = p[which][i];
            p[which][i] = x0 + h;
            let up = f(&p);
            p[which][i] = x0 - h;
            let down = f(&p);
            p[which][i] = x0;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn weighted_sum(out: &Tensor<f64>, r: &[f64]) -> f64 {
    out.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Builds `loss = Σ out ⊙ r` on the tape and returns gradients of the leaves.
fn tape_grads(
    leaves: &[Tensor],
    r: &Tensor,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> Vec<Vec<f32>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let rv = tape.leaf(r.clone());
    let prod = tape.mul(out, rv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    vars.iter().map(|v| grads.get(*v).unwrap().data().to_vec()).collect()
}

const H: f64 = 1e-3;

/// Worst relative error of the conv2d input and weight gradients.
pub fn conv_grad_error(rng: &mut impl Rng) -> f64 {
    let (n, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let (hw, k) = (rng.random_range(3..=5), [1, 3][rng.random_range(0..2)]);
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=k / 2);
    let x = rand_tensor(rng, &[n, ci, hw, hw], -1.0, 1.0);
    let w = rand_tensor(rng, &[co, ci, k, k], -1.0, 1.0);
    let out_shape = tensor::conv2d(&x, &w, stride, padding).unwrap().shape().to_vec();
    let r = rand_tensor(rng, &out_shape, -1.0, 1.0);
    let analytic = tape_grads(&[x.clone(), w.clone()], &r, |t, v| {
        t.conv2d(v[0], v[1], stride, padding).unwrap()
    });
    let (xs, ws, rr) = (x.shape().to_vec(), w.shape().to_vec(), to_f64(&r));
    let f = |p: &[Vec<f64>]| {
        weighted_sum(&tensor::conv2d(&t64(&xs, &p[0]), &t64(&ws, &p[1]), stride, padding).unwrap(), &rr)
    };
    let params = vec![to_f64(&x), to_f64(&w)];
    (0..2)
        .map(|i| relative_error(&analytic[i], &finite_difference(&params, i, H, &f)))
        .fold(0.0, f64::max)
}

/// Worst relative error of the inference batch-norm gradients (input, γ, β).
pub fn bn_grad_error(rng: &mut impl Rng) -> f64 {
    let (n, c, hw) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=3));
    let x = rand_tensor(rng, &[n, c, hw, hw], -1.0, 1.0);
    let g = rand_tensor(rng, &[c], 0.5, 1.5);
    let b = rand_tensor(rng, &[c], -0.5, 0.5);
    let mu: Vec<f32> = (0..c).map(|_| rng.random_range(-0.3..0.3)).collect();
    let sigma: Vec<f32> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
    let r = rand_tensor(rng, x.shape(), -1.0, 1.0);
    let analytic = tape_grads(&[x.clone(), g.clone(), b.clone()], &r, |t, v| {
        t.batch_norm(v[0], &mu, &sigma, v[1], v[2]).unwrap()
    });
    let xs = x.shape().to_vec();
    let rr = to_f64(&r);
    let mu64: Vec<f64> = mu.iter().map(|&v| v as f64).collect();
    let sg64: Vec<f64> = sigma.iter().map(|&v| v as f64).collect();
    let f = |p: &[Vec<f64>]| {
        weighted_sum(&tensor::batch_norm(&t64(&xs, &p[0]), &mu64, &sg64, &p[1], &p[2]).unwrap(), &rr)
    };
    let params = vec![to_f64(&x), to_f64(&g), to_f64(&b)];
    (0..3)
        .map(|i| relative_error(&analytic[i], &finite_difference(&params, i, H, &f)))
        .fold(0.0, f64::max)
}

/// Training-mode batch norm in float64: batch statistics, `sqrt(var + eps)`.
pub fn batch_norm_train_f64(x: &[f64], shape: &[usize], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let m = (n * inner) as f64;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let idx = |bi: usize, i: usize| (bi * c + ch) * inner + i;
        let mut mean = 0.0;
        for bi in 0..n {
            for i in 0..inner {
                mean += x[idx(bi, i)];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for bi in 0..n {
            for i in 0..inner {
                var += (x[idx(bi, i)] - mean).powi(2);
            }
        }
        var /= m;
        let inv = 1.0 / (var + eps).sqrt();
        for bi in 0..n {
            for i in 0..inner {
                out[idx(bi, i)] = g[ch] * (x[idx(bi, i)] - mean) * inv + b[ch];
            }
        }
    }
    out
}

/// Worst relative error of the batch-statistics batch-norm gradients.
pub fn bn_train_grad_error(rng: &mut impl Rng) -> f64 {
    let (n, c, hw) = (rng.random_range(2..=3), rng.random_range(1..=3), rng.random_range(2..=3));
    let x = rand_tensor(rng, &[n, c, hw, hw], -1.0, 1.0);
    let g = rand_tensor(rng, &[c], 0.5, 1.5);
    let b = rand_tensor(rng, &[c], -0.5, 0.5);
    let r = rand_tensor(rng, x.shape(), -1.0, 1.0);
    let eps = 1e-5f32;
    let analytic = tape_grads(&[x.clone(), g.clone(), b.clone()], &r, |t, v| {
        t.batch_norm_train(v[0], v[1], v[2], eps).unwrap().0
    });
    let xs = x.shape().to_vec();
    let rr = to_f64(&r);
    let f = |p: &[Vec<f64>]| {
        batch_norm_train_f64(&p[0], &xs, &p[1], &p[2], eps as f64)
            .iter()
            .zip(&rr)
            .map(|(a, b)| a * b)
            .sum()
    };
    let params = vec![to_f64(&x), to_f64(&g), to_f64(&b)];
    (0..3)
        .map(|i| relative_error(&analytic[i], &finite_difference(&params, i, H, &f)))
        .fold(0.0, f64::max)
}

/// Worst relative error of the linear-layer gradients (input, W, b).
pub fn linear_grad_error(rng: &mut impl Rng) -> f64 {
    let (n, fi, fo) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=4));
    let x = rand_tensor(rng, &[n, fi], -1.0, 1.0);
    let w = rand_tensor(rng, &[fo, fi], -1.0, 1.0);
    let b = rand_tensor(rng, &[fo], -1.0, 1.0);
    let r = rand_tensor(rng, &[n, fo], -1.0, 1.0);
    let analytic = tape_grads(&[x.clone(), w.clone(), b.clone()], &r, |t, v| {
        t.linear(v[0], v[1], v[2]).unwrap()
    });
    let (xs, ws, rr) = (x.shape().to_vec(), w.shape().to_vec(), to_f64(&r));
    let f = |p: &[Vec<f64>]| {
        weighted_sum(&tensor::linear(&t64(&xs, &p[0]), &t64(&ws, &p[1]), &p[2]).unwrap(), &rr)
    };
    let params = vec![to_f64(&x), to_f64(&w), to_f64(&b)];
    (0..3)
        .map(|i| relative_error(&analytic[i], &finite_difference(&params, i, H, &f)))
        .fold(0.0, f64::max)
}

/// The desk task: 2-class synthetic blobs, a quarter held out.
pub fn desk_task() -> (Dataset, Dataset) {
    gen_synthetic(7, 512, 2).unwrap().split(0.25).unwrap()
}

/// Three blocks, pooling after the second, Q = 16.
pub fn desk_arch() -> Architecture {
    let mut arch = Architecture::new([1, 8, 8], vec![8, 16, 16], 2, 16);
    arch.pool_after = vec![1];
    arch
}

pub fn desk_config() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        seed: 5,
        ..TrainConfig::default()
    }
}

/// Trains the desk model from a fixed initialization; `coeff = 0` disables
/// the activity penalty.
pub fn train_desk(train_set: &Dataset, coeff: f32) -> (AnnModel, History) {
    let mut model = desk_arch().init(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let reg = RegularizerConfig { coeff };
    let history = train(&mut model, train_set, &desk_config(), (coeff > 0.0).then_some(&reg)).unwrap();
    (model, history)
}
