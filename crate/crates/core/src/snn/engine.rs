//! Time-stepped inference for converted networks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::neuron::{fire_modified_tensor, modified_offset, BaselineLayer};
use super::{Result, SnnError};
use crate::ann::{cast_slice, qcfs, ConvBnBlock, Layer};
use crate::convert::{NeuronModel, SnnModel};
use crate::tensor::{self, Scalar, Tensor};

/// Order in which (layer, time step) pairs are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    /// All T steps of one layer before the next layer starts.
    LayerByLayer,
    /// All layers for one time step before the next step starts.
    StepByStep,
}

impl FromStr for Scheduler {
    type Err = SnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer_by_layer" | "layer-by-layer" => Ok(Self::LayerByLayer),
            "step_by_step" | "step-by-step" => Ok(Self::StepByStep),
            other => Err(SnnError::Unsupported(format!(
                "unknown scheduler {other:?} (expected layer_by_layer or step_by_step)"
            ))),
        }
    }
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LayerByLayer => "layer_by_layer",
            Self::StepByStep => "step_by_step",
        })
    }
}

/// Simulated resource use of one inference.
///
/// Live planes counts neuron-sized tensors held at once: spike planes,
/// membrane potentials, in-flight currents and cached drives. Latency is in
/// units of one layer processing one time step; under layer-by-layer
/// scheduling each layer costs `1 + (T−1)(1−ρ)` units, where ρ is the
/// fraction of per-step work fused across time steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub scheduler: Scheduler,
    pub timesteps: u32,
    /// Spiking blocks plus the accumulating head.
    pub layers: usize,
    pub peak_live_planes: usize,
    pub latency_units: f64,
    /// Number of (layer, step) evaluations performed.
    pub layer_steps: usize,
}

impl CostLedger {
    fn new(scheduler: Scheduler, timesteps: u32, layers: usize) -> Self {
        Self {
            scheduler,
            timesteps,
            layers,
            peak_live_planes: 0,
            latency_units: 0.0,
            layer_steps: 0,
        }
    }

    fn observe(&mut self, live: usize) {
        self.peak_live_planes = self.peak_live_planes.max(live);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineOptions {
    /// Fusion credit ρ ∈ [0, 1] for the layer-by-layer latency model.
    pub fusion_credit: f64,
    /// Baseline initial potential as a fraction of θ.
    pub baseline_u0: f64,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            fusion_credit: 0.5,
            baseline_u0: 0.5,
        }
    }
}

/// Everything one spiking block produced.
#[derive(Debug, Clone)]
pub struct LayerTrace<S = f32> {
    /// Spike planes in emission order `t = 1..=T`.
    pub spikes: Vec<Tensor<S>>,
    /// Output rate: `Σ_t s(t)·θ/2^t` (modified) or `Σ_t s(t)·θ/T` (baseline).
    pub rate: Tensor<S>,
    /// Potential before the first spike decision.
    pub initial_potential: Tensor<S>,
    /// Potential after the last step.
    pub final_potential: Tensor<S>,
    /// Mean input current `Z(T) = Σ_t z(t)/T`.
    pub mean_current: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct SnnTrace<S = f32> {
    pub logits: Tensor<S>,
    pub layers: Vec<LayerTrace<S>>,
    pub ledger: CostLedger,
}

enum Stage<'a> {
    Block {
        block: &'a ConvBnBlock,
        theta: f32,
        pools: Vec<usize>,
    },
    Head {
        pools: Vec<usize>,
    },
}

fn stages(snn: &SnnModel) -> Vec<Stage<'_>> {
    let mut out = Vec::new();
    let mut pools = Vec::new();
    let mut thetas = snn.thresholds.iter();
    for layer in &snn.network.layers {
        match layer {
            Layer::AvgPool(s) => pools.push(*s),
            Layer::Block(block) => out.push(Stage::Block {
                block,
                theta: *thetas.next().expect("one threshold per block"),
                pools: std::mem::take(&mut pools),
            }),
        }
    }
    out.push(Stage::Head { pools });
    out
}

fn pool_all<S: Scalar>(x: &Tensor<S>, pools: &[usize]) -> Result<Tensor<S>> {
    let mut h = x.clone();
    for &s in pools {
        h = tensor::avgpool2d(&h, s)?;
    }
    Ok(h)
}

fn pow2<S: Scalar>(e: i32) -> S {
    S::from_f64(f64::powi(2.0, e))
}

/// Input current of a shifted block at shift index `t` (1-based): the plane
/// carrying weight `2^(t−1)` of an activation with ceiling θ_prev,
/// `γ(W·(2^(t−1)·s·θ_prev/2^T) − μ)/σ + β_c`.
pub fn step_current<S: Scalar>(
    block: &ConvBnBlock,
    plane: &Tensor<S>,
    t: u32,
    timesteps: u32,
    theta_prev: f32,
) -> Result<Tensor<S>> {
    if t == 0 || t > timesteps {
        return Err(SnnError::Unsupported(format!(
            "time step {t} outside 1..={timesteps}"
        )));
    }
    let scale = S::from_f32(theta_prev) * pow2::<S>(t as i32 - 1 - timesteps as i32);
    Ok(block.pre_activation(&plane.scale(scale))?)
}

/// Spike planes of the first block: its conv and batch norm run once on the
/// analog input and the result is quantized to `2^T` levels with ceiling
/// `(2^T − 1)θ/2^T`. Planes come most significant first.
pub fn encode_input_block<S: Scalar>(snn: &SnnModel, x: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
    Ok(encode_first(snn, x)?.spikes)
}

fn encode_first<S: Scalar>(snn: &SnnModel, x: &Tensor<S>) -> Result<LayerTrace<S>> {
    snn.network.check_input(x)?;
    let stages = stages(snn);
    let Stage::Block { block, theta, pools } = &stages[0] else {
        unreachable!("validated models have at least one block")
    };
    let t_steps = snn.timesteps;
    let levels = 1u32 << t_steps;
    let z = block.pre_activation(&pool_all(x, pools)?)?;
    let lam = *theta as f64;
    let codes: Vec<u32> = z
        .data()
        .iter()
        .map(|&v| qcfs::level(v.as_f64(), lam, levels, levels - 1))
        .collect();
    let spikes = (1..=t_steps)
        .map(|t| {
            let shift = t_steps - t;
            let data = codes
                .iter()
                .map(|&c| if (c >> shift) & 1 == 1 { S::one() } else { S::zero() })
                .collect();
            Tensor::new(z.shape().to_vec(), data).expect("plane shape")
        })
        .collect();
    let rate = Tensor::new(
        z.shape().to_vec(),
        codes
            .iter()
            .map(|&c| S::from_f64(lam * c as f64 / levels as f64))
            .collect(),
    )
    .expect("rate shape");
    let offset = modified_offset(S::from_f32(*theta), t_steps);
    let initial = z.map(|v| v + offset);
    let final_potential = initial.zip_map(&rate, "residual", |u, r| u - r)?;
    Ok(LayerTrace {
        spikes,
        rate,
        initial_potential: initial,
        final_potential,
        mean_current: z.scale(S::one() / S::from_usize(t_steps as usize)),
    })
}

fn bit_weighted_rate<S: Scalar>(planes: &[Tensor<S>], theta: S) -> Tensor<S> {
    let mut rate = Tensor::zeros(planes[0].shape());
    for (i, p) in planes.iter().enumerate() {
        let w = theta * pow2::<S>(-(i as i32) - 1);
        for (r, &s) in rate.data_mut().iter_mut().zip(p.data()) {
            *r = *r + s * w;
        }
    }
    rate
}

/// Runs one inference with default engine options.
pub fn run_snn<S: Scalar>(snn: &SnnModel, x: &Tensor<S>, scheduler: Scheduler) -> Result<SnnTrace<S>> {
    run_snn_with(snn, x, scheduler, &EngineOptions::default())
}

pub fn run_snn_with<S: Scalar>(
    snn: &SnnModel,
    x: &Tensor<S>,
    scheduler: Scheduler,
    opts: &EngineOptions,
) -> Result<SnnTrace<S>> {
    snn.network.check_input(x)?;
    if !(0.0..=1.0).contains(&opts.fusion_credit) {
        return Err(SnnError::Unsupported(format!(
            "fusion credit {} outside [0, 1]",
            opts.fusion_credit
        )));
    }
    match (snn.neuron, scheduler) {
        (NeuronModel::Modified, Scheduler::LayerByLayer) => run_modified(snn, x, opts),
        (NeuronModel::Modified, Scheduler::StepByStep) => Err(SnnError::Unsupported(
            "the bit-serial neuron needs the full accumulated current before its first spike, \
             so a layer cannot emit step t before all T input steps arrive; use layer_by_layer"
                .into(),
        )),
        (NeuronModel::Baseline, Scheduler::LayerByLayer) => run_baseline_layerwise(snn, x, opts),
        (NeuronModel::Baseline, Scheduler::StepByStep) => run_baseline_stepwise(snn, x, opts),
    }
}

fn layer_latency(t: u32, rho: f64) -> f64 {
    1.0 + (t as f64 - 1.0) * (1.0 - rho)
}

fn head_current<S: Scalar>(
    snn: &SnnModel,
    plane: &Tensor<S>,
    scale: S,
    bias: &[S],
) -> Result<Tensor<S>> {
    Ok(tensor::linear(
        &tensor::flatten(&plane.scale(scale)),
        &snn.network.head.weight.cast(),
        bias,
    )?)
}

fn accumulate<S: Scalar>(acc: &mut Option<Tensor<S>>, x: Tensor<S>) -> Result<()> {
    match acc {
        Some(a) => a.add_assign(&x)?,
        None => *acc = Some(x),
    }
    Ok(())
}

fn run_modified<S: Scalar>(snn: &SnnModel, x: &Tensor<S>, opts: &EngineOptions) -> Result<SnnTrace<S>> {
    let t_steps = snn.timesteps;
    let stages = stages(snn);
    let mut ledger = CostLedger::new(Scheduler::LayerByLayer, t_steps, stages.len());
    let per_layer = layer_latency(t_steps, opts.fusion_credit);

    let first = encode_first(snn, x)?;
    // analog input, potential, and the emitted planes
    ledger.observe(2 + t_steps as usize);
    ledger.latency_units += per_layer;
    ledger.layer_steps += t_steps as usize;

    let mut theta_prev = snn.thresholds[0];
    let mut planes = first.spikes.clone();
    let mut layers = vec![first];
    let mut logits = None;

    for stage in &stages[1..] {
        match stage {
            Stage::Block { block, theta, pools } => {
                let inputs: Vec<Tensor<S>> =
                    planes.iter().map(|p| pool_all(p, pools)).collect::<Result<_>>()?;
                let mut u: Option<Tensor<S>> = None;
                for t in 1..=t_steps {
                    // plane with weight 2^(t-1) is emitted at step T - t + 1
                    let plane = &inputs[(t_steps - t) as usize];
                    let z = step_current(block, plane, t, t_steps, theta_prev)?;
                    accumulate(&mut u, z)?;
                    // inputs, potential, in-flight current
                    ledger.observe(inputs.len() + 2);
                }
                let summed = u.expect("T >= 1");
                let th = S::from_f32(*theta);
                let initial = summed.map(|v| v + modified_offset(th, t_steps));
                let (spikes, residual) = fire_modified_tensor(&initial, th, t_steps);
                ledger.observe(inputs.len() + spikes.len() + 1);
                ledger.latency_units += per_layer;
                ledger.layer_steps += t_steps as usize;
                layers.push(LayerTrace {
                    rate: bit_weighted_rate(&spikes, th),
                    mean_current: summed.scale(S::one() / S::from_usize(t_steps as usize)),
                    initial_potential: initial,
                    final_potential: residual,
                    spikes: spikes.clone(),
                });
                planes = spikes;
                theta_prev = *theta;
            }
            Stage::Head { pools } => {
                let bias: Vec<S> = cast_slice::<S>(&snn.network.head.bias)
                    .into_iter()
                    .map(|b| b / S::from_usize(t_steps as usize))
                    .collect();
                let mut acc = None;
                for t in 1..=t_steps {
                    let plane = pool_all(&planes[(t_steps - t) as usize], pools)?;
                    let scale =
                        S::from_f32(theta_prev) * pow2::<S>(t as i32 - 1 - t_steps as i32);
                    accumulate(&mut acc, head_current(snn, &plane, scale, &bias)?)?;
                    ledger.observe(planes.len() + 2);
                }
                ledger.latency_units += per_layer;
                ledger.layer_steps += t_steps as usize;
                logits = acc;
            }
        }
    }
    Ok(SnnTrace {
        logits: logits.expect("head stage"),
        layers,
        ledger,
    })
}

/// Per-block state shared by both baseline schedulers.
struct BaselineBlock<S> {
    neurons: BaselineLayer<S>,
    initial: Tensor<S>,
    current_sum: Option<Tensor<S>>,
    spikes: Vec<Tensor<S>>,
}

struct BaselineRun<'a, S> {
    snn: &'a SnnModel,
    stages: Vec<Stage<'a>>,
    drive: Tensor<S>,
    blocks: Vec<BaselineBlock<S>>,
    head_acc: Option<Tensor<S>>,
    head_bias: Vec<S>,
}

impl<'a, S: Scalar> BaselineRun<'a, S> {
    fn new(snn: &'a SnnModel, x: &Tensor<S>, opts: &EngineOptions) -> Result<Self> {
        let stages = stages(snn);
        let mut drive = None;
        let mut blocks = Vec::new();
        let n = x.batch();
        for (stage, shape) in stages.iter().zip(block_shapes(snn)) {
            if let Stage::Block { block, theta, pools } = stage {
                if drive.is_none() {
                    drive = Some(block.pre_activation(&pool_all(x, pools)?)?);
                }
                let th = S::from_f32(*theta);
                let u0 = th * S::from_f64(opts.baseline_u0);
                let full = [n, shape[0], shape[1], shape[2]];
                let neurons = BaselineLayer::new(&full, th, u0);
                blocks.push(BaselineBlock {
                    initial: neurons.potential.clone(),
                    neurons,
                    current_sum: None,
                    spikes: Vec::new(),
                });
            }
        }
        Ok(Self {
            snn,
            stages,
            drive: drive.expect("at least one block"),
            blocks,
            head_acc: None,
            head_bias: cast_slice(&snn.network.head.bias),
        })
    }

    /// Evaluates stage `j` at step `t` (1-based). Spikes of stage `j − 1` at
    /// step `t` must already exist.
    fn step(&mut self, j: usize, t: usize) -> Result<()> {
        let input = if j == 0 {
            None
        } else {
            Some(self.blocks[j - 1].spikes[t - 1].clone())
        };
        let theta_prev = if j == 0 {
            S::zero()
        } else {
            self.blocks[j - 1].neurons.theta
        };
        match &self.stages[j] {
            Stage::Block { block, pools, .. } => {
                let z = match &input {
                    None => self.drive.clone(),
                    Some(p) => block.pre_activation(&pool_all(p, pools)?.scale(theta_prev))?,
                };
                let b = &mut self.blocks[j];
                let s = b.neurons.step(&z);
                accumulate(&mut b.current_sum, z)?;
                b.spikes.push(s);
            }
            Stage::Head { pools } => {
                let p = pool_all(input.as_ref().expect("head follows a block"), pools)?;
                let c = head_current(self.snn, &p, theta_prev, &self.head_bias)?;
                accumulate(&mut self.head_acc, c)?;
            }
        }
        Ok(())
    }

    fn finish(self, ledger: CostLedger) -> SnnTrace<S> {
        let t = S::from_usize(self.snn.timesteps as usize);
        let inv_t = S::one() / t;
        let layers = self
            .blocks
            .into_iter()
            .map(|b| {
                let theta = b.neurons.theta;
                let mut count = Tensor::zeros(b.initial.shape());
                for s in &b.spikes {
                    count.add_assign(s).expect("same shape");
                }
                LayerTrace {
                    rate: count.map(|c| c * theta / t),
                    mean_current: b.current_sum.expect("T >= 1").scale(inv_t),
                    initial_potential: b.initial,
                    final_potential: b.neurons.potential,
                    spikes: b.spikes,
                }
            })
            .collect();
        SnnTrace {
            logits: self.head_acc.expect("T >= 1").map(|v| v / t),
            layers,
            ledger,
        }
    }
}

fn block_shapes(snn: &SnnModel) -> Vec<[usize; 3]> {
    snn.network
        .layers
        .iter()
        .zip(snn.network.layer_shapes())
        .filter(|(l, _)| matches!(l, Layer::Block(_)))
        .map(|(_, s)| s)
        .collect()
}

fn run_baseline_layerwise<S: Scalar>(
    snn: &SnnModel,
    x: &Tensor<S>,
    opts: &EngineOptions,
) -> Result<SnnTrace<S>> {
    let t_steps = snn.timesteps as usize;
    let mut run = BaselineRun::new(snn, x, opts)?;
    let n_stages = run.stages.len();
    let mut ledger = CostLedger::new(Scheduler::LayerByLayer, snn.timesteps, n_stages);
    let per_layer = layer_latency(snn.timesteps, opts.fusion_credit);
    for j in 0..n_stages {
        for t in 1..=t_steps {
            run.step(j, t)?;
            ledger.layer_steps += 1;
            let held_in = if j == 0 { 1 } else { t_steps };
            let held_out = if j + 1 < n_stages { t } else { 0 };
            // inputs, outputs so far, potential, in-flight current
            ledger.observe(held_in + held_out + 2);
        }
        ledger.latency_units += per_layer;
    }
    Ok(run.finish(ledger))
}

fn run_baseline_stepwise<S: Scalar>(
    snn: &SnnModel,
    x: &Tensor<S>,
    opts: &EngineOptions,
) -> Result<SnnTrace<S>> {
    let t_steps = snn.timesteps as usize;
    let mut run = BaselineRun::new(snn, x, opts)?;
    let n_stages = run.stages.len();
    let mut ledger = CostLedger::new(Scheduler::StepByStep, snn.timesteps, n_stages);
    for t in 1..=t_steps {
        for j in 0..n_stages {
            run.step(j, t)?;
            ledger.layer_steps += 1;
            // every potential, the cached drive, one plane in, one out, one current
            ledger.observe(n_stages + 4);
            ledger.latency_units += 1.0;
        }
    }
    Ok(run.finish(ledger))
}
