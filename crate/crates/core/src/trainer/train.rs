//! Quantization-aware training loop: SGD with momentum, cosine learning-rate
//! decay per epoch, weight decay on conv and linear weights only, and the
//! optional bit-level activity penalty.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::data::Dataset;
use super::regularizer::count_bits;
use crate::ann::{AnnError, AnnModel, Layer};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Epsilon folded into the stored BN sigma.
pub const BN_EPS: f32 = 1e-5;
/// Weight of the previous running statistic in the BN update.
pub const BN_MOMENTUM: f32 = 0.9;
/// Lower bound applied to every threshold after an update.
pub const MIN_LAMBDA: f32 = 1e-3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss: f32,
    },
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ann(#[from] AnnError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.batch == 0 {
            return Err("batch must be positive".into());
        }
        Ok(())
    }

    /// Cosine-decayed learning rate of `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let frac = epoch as f64 / self.epochs.max(1) as f64;
        (self.lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())) as f32
    }
}

/// Activity penalty weight. Applied to every block, never to the head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub coeff: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f32,
    /// Mean total loss over batches.
    pub loss: f64,
    pub ce_loss: f64,
    /// Mean per-sample penalty (zero without a regularizer).
    pub sp_loss: f64,
    pub train_accuracy: f64,
    /// Fraction of set activation bits during the epoch's forward passes.
    pub bit_density: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

/// Which tensor of the model a trainable parameter is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Param {
    Weight(usize),
    Gamma(usize),
    Beta(usize),
    Lambda(usize),
    HeadWeight,
    HeadBias,
}

impl Param {
    fn decays(self) -> bool {
        matches!(self, Param::Weight(_) | Param::HeadWeight)
    }
}

fn block_mut(model: &mut AnnModel, i: usize) -> &mut crate::ann::ConvBnBlock {
    model.blocks_mut().nth(i).expect("block index")
}

fn param_values(model: &mut AnnModel, p: Param) -> &mut [f32] {
    match p {
        Param::Weight(i) => block_mut(model, i).weight.data_mut(),
        Param::Gamma(i) => &mut block_mut(model, i).gamma,
        Param::Beta(i) => &mut block_mut(model, i).beta,
        Param::Lambda(i) => std::slice::from_mut(&mut block_mut(model, i).activation.lambda),
        Param::HeadWeight => model.head.weight.data_mut(),
        Param::HeadBias => &mut model.head.bias,
    }
}

fn params(model: &AnnModel) -> Vec<Param> {
    let mut out = Vec::new();
    for i in 0..model.num_blocks() {
        out.extend([Param::Weight(i), Param::Gamma(i), Param::Beta(i), Param::Lambda(i)]);
    }
    out.extend([Param::HeadWeight, Param::HeadBias]);
    out
}

struct BatchResult {
    loss: f32,
    ce: f32,
    sp: f32,
    correct: usize,
    bits: u64,
    bit_slots: u64,
    grads: Vec<Tensor>,
    stats: Vec<crate::tensor::BatchStats>,
}

fn run_batch(
    model: &mut AnnModel,
    plist: &[Param],
    x: Tensor,
    labels: &[usize],
    reg: Option<&RegularizerConfig>,
) -> Result<BatchResult> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = plist
        .iter()
        .map(|&p| {
            let t = match p {
                Param::Weight(i) => model.blocks().nth(i).expect("block").weight.clone(),
                Param::HeadWeight => model.head.weight.clone(),
                other => {
                    let v = param_values(model, other).to_vec();
                    Tensor::from_parts(vec![v.len()], v)
                }
            };
            tape.leaf(t)
        })
        .collect();
    let var_of = |p: Param| vars[plist.iter().position(|&q| q == p).expect("param listed")];

    let batch = labels.len();
    let mut h = tape.leaf(x);
    let mut stats = Vec::new();
    let mut penalties = Vec::new();
    let mut bits = 0u64;
    let mut bit_slots = 0u64;
    let mut bi = 0;
    for layer in &model.layers {
        match layer {
            Layer::Block(b) => {
                let y = tape.conv2d(h, var_of(Param::Weight(bi)), b.stride, b.padding)?;
                let (z, st) =
                    tape.batch_norm_train(y, var_of(Param::Gamma(bi)), var_of(Param::Beta(bi)), BN_EPS)?;
                stats.push(st);
                let act = b.activation;
                let a = tape.qcfs(z, var_of(Param::Lambda(bi)), act.q_steps, act.clip_hi)?;
                let lam = tape.value(var_of(Param::Lambda(bi)))?.data()[0];
                let av = tape.value(a)?;
                bits += count_bits(av, lam, act.q_steps)?;
                bit_slots += av.numel() as u64 * act.bits() as u64;
                if let Some(r) = reg {
                    // per-sample penalty, so its scale does not depend on batch size
                    penalties.push(tape.sparsity_penalty(a, lam, act.q_steps, r.coeff / batch as f32)?);
                }
                h = a;
                bi += 1;
            }
            Layer::AvgPool(s) => h = tape.avgpool2d(h, *s)?,
        }
    }
    let flat = tape.flatten(h)?;
    let logits = tape.linear(flat, var_of(Param::HeadWeight), var_of(Param::HeadBias))?;
    let ce = tape.cross_entropy(logits, labels)?;
    let mut loss = ce;
    let mut sp = 0.0f32;
    for p in penalties {
        sp += tape.value(p)?.data()[0];
        loss = tape.add(loss, p)?;
    }
    let correct = tape
        .value(logits)?
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    let loss_value = tape.value(loss)?.data()[0];
    let ce_value = tape.value(ce)?.data()[0];
    if !loss_value.is_finite() {
        return Ok(BatchResult {
            loss: loss_value,
            ce: ce_value,
            sp,
            correct,
            bits,
            bit_slots,
            grads: Vec::new(),
            stats,
        });
    }
    let mut g = tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(plist)
        .map(|(&v, &p)| {
            g.take(v).ok_or_else(|| {
                TrainError::Invalid(format!("parameter {p:?} received no gradient"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchResult {
        loss: loss_value,
        ce: ce_value,
        sp,
        correct,
        bits,
        bit_slots,
        grads,
        stats,
    })
}

/// Trains `model` in place. `reg = None` is plain cross-entropy training.
///
/// The running BN variance is tracked internally and written back as
/// `sigma = sqrt(var + eps)` after every epoch.
pub fn train(
    model: &mut AnnModel,
    data: &Dataset,
    cfg: &TrainConfig,
    reg: Option<&RegularizerConfig>,
) -> Result<History> {
    cfg.validate().map_err(TrainError::Invalid)?;
    model.validate()?;
    if data.is_empty() {
        return Err(TrainError::Invalid("empty dataset".into()));
    }
    if data.image_shape() != model.input_shape {
        return Err(TrainError::Invalid(format!(
            "dataset images {:?} do not match model input {:?}",
            data.image_shape(),
            model.input_shape
        )));
    }
    if data.classes != model.classes() {
        return Err(TrainError::Invalid(format!(
            "dataset has {} classes, model has {}",
            data.classes,
            model.classes()
        )));
    }
    if let Some(r) = reg {
        if !(r.coeff >= 0.0) {
            return Err(TrainError::Invalid(format!("negative coefficient {}", r.coeff)));
        }
    }

    let plist = params(model);
    let mut velocity: Vec<Vec<f32>> = plist
        .iter()
        .map(|&p| vec![0.0; param_values(model, p).len()])
        .collect();
    let mut running_mean: Vec<Vec<f32>> = model.blocks().map(|b| b.mu.clone()).collect();
    let mut running_var: Vec<Vec<f32>> = model
        .blocks()
        .map(|b| b.sigma.iter().map(|s| (s * s - BN_EPS).max(0.0)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = History::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = data.shuffled_indices(&mut rng);
        let (mut loss_sum, mut ce_sum, mut sp_sum) = (0.0f64, 0.0f64, 0.0f64);
        let (mut correct, mut bits, mut slots, mut batches) = (0usize, 0u64, 0u64, 0usize);
        for (bidx, chunk) in order.chunks(cfg.batch).enumerate() {
            let x = data.images.select_batch(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let r = run_batch(model, &plist, x, &labels, reg)?;
            if !r.loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bidx,
                    loss: r.loss,
                });
            }
            for (k, &p) in plist.iter().enumerate() {
                let decay = if p.decays() { cfg.weight_decay } else { 0.0 };
                let grad = r.grads[k].data();
                let vel = &mut velocity[k];
                let values = param_values(model, p);
                for ((w, v), &g) in values.iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = cfg.momentum * *v + g + decay * *w;
                    *w -= lr * *v;
                }
                if let Param::Lambda(_) = p {
                    values[0] = values[0].max(MIN_LAMBDA);
                }
            }
            for (l, st) in r.stats.iter().enumerate() {
                for c in 0..st.mean.len() {
                    running_mean[l][c] =
                        BN_MOMENTUM * running_mean[l][c] + (1.0 - BN_MOMENTUM) * st.mean[c];
                    running_var[l][c] =
                        BN_MOMENTUM * running_var[l][c] + (1.0 - BN_MOMENTUM) * st.var[c];
                }
            }
            loss_sum += r.loss as f64;
            ce_sum += r.ce as f64;
            sp_sum += r.sp as f64;
            correct += r.correct;
            bits += r.bits;
            slots += r.bit_slots;
            batches += 1;
        }
        for (l, b) in model.blocks_mut().enumerate() {
            b.mu = running_mean[l].clone();
            b.sigma = running_var[l].iter().map(|v| (v + BN_EPS).sqrt()).collect();
        }
        let nb = batches.max(1) as f64;
        history.epochs.push(EpochStats {
            epoch,
            lr,
            loss: loss_sum / nb,
            ce_loss: ce_sum / nb,
            sp_loss: sp_sum / nb,
            train_accuracy: correct as f64 / data.len() as f64,
            bit_density: if slots == 0 { 0.0 } else { bits as f64 / slots as f64 },
        });
    }
    model.validate()?;
    Ok(history)
}

/// Fraction of samples whose arg-max logit equals the label, using the
/// stored (running) BN statistics.
pub fn accuracy(model: &AnnModel, data: &Dataset) -> Result<f64> {
    let mut correct = 0;
    for start in (0..data.len()).step_by(256) {
        let end = (start + 256).min(data.len());
        let logits = model.logits(&data.images.slice_batch(start, end)?)?;
        correct += logits
            .argmax_rows()
            .iter()
            .zip(&data.labels[start..end])
            .filter(|(a, b)| a == b)
            .count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Fraction of set activation bits over every block when running `data`
/// through the model in inference mode.
pub fn bit_density(model: &AnnModel, data: &Dataset) -> Result<f64> {
    let (mut bits, mut slots) = (0u64, 0u64);
    for start in (0..data.len()).step_by(256) {
        let end = (start + 256).min(data.len());
        let trace = model.forward(&data.images.slice_batch(start, end)?)?;
        for (a, b) in trace.activations.iter().zip(model.blocks()) {
            bits += count_bits(a, b.activation.lambda, b.activation.q_steps)?;
            slots += a.numel() as u64 * b.activation.bits() as u64;
        }
    }
    Ok(if slots == 0 { 0.0 } else { bits as f64 / slots as f64 })
}
