//! Operation counts and energy estimates for spiking inference.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AnalyzeError, Result};
use crate::ann::{AnnModel, Layer};

/// Picojoules per operation at one bit width. A potential reset is charged
/// as an addition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpEnergy {
    pub mult: f64,
    pub add: f64,
    pub shift: f64,
    pub compare: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyTable {
    /// Where the numbers come from.
    pub provenance: String,
    /// Keyed by bit width.
    pub widths: BTreeMap<u32, OpEnergy>,
}

impl Default for EnergyTable {
    /// 45 nm CMOS estimates for 32-bit and 8-bit integer arithmetic.
    fn default() -> Self {
        let mut widths = BTreeMap::new();
        widths.insert(
            32,
            OpEnergy {
                mult: 3.1,
                add: 0.1,
                shift: 0.13,
                compare: 0.08,
            },
        );
        widths.insert(
            8,
            OpEnergy {
                mult: 0.2,
                add: 0.03,
                shift: 0.024,
                compare: 0.03,
            },
        );
        Self {
            provenance: "built-in 45nm integer operation table (pJ)".into(),
            widths,
        }
    }
}

impl EnergyTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text)
            .map_err(|e| AnalyzeError::Invalid(format!("energy table: {e}")))?;
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        for (w, e) in &self.widths {
            for (name, v) in [("mult", e.mult), ("add", e.add), ("shift", e.shift), ("compare", e.compare)] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(AnalyzeError::Invalid(format!(
                        "energy table entry {name}@{w} must be positive, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, width: u32) -> Result<&OpEnergy> {
        self.widths
            .get(&width)
            .ok_or(AnalyzeError::MissingEntry { width })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// First block: runs on the analog input with multiplications.
    Input,
    Spiking,
    /// Classifier: accumulates without spiking.
    Head,
}

/// Operation counts of one layer over a whole inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerOps {
    pub layer: usize,
    pub kind: LayerKind,
    /// Output neurons (entries of one output plane).
    pub neurons: u64,
    /// Mean density of the layer's input spikes (1 for the analog input).
    pub input_density: f64,
    pub macs: f64,
    pub acs: f64,
    /// One left shift per produced current entry per step.
    pub input_shifts: f64,
    /// One threshold halving per layer per step.
    pub threshold_shifts: f64,
    pub comparisons: f64,
    pub resets: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpCounts {
    pub timesteps: u32,
    pub layers: Vec<LayerOps>,
}

/// Shape facts needed to count the operations of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Geometry {
    fan_in: u64,
    fan_out_entries: u64,
    kind: LayerKind,
}

fn geometries(model: &AnnModel) -> Vec<Geometry> {
    let shapes = model.layer_shapes();
    let mut out = Vec::new();
    for (layer, shape) in model.layers.iter().zip(&shapes) {
        if let Layer::Block(b) = layer {
            let k = b.kernel() as u64;
            out.push(Geometry {
                fan_in: k * k * b.in_channels() as u64,
                fan_out_entries: shape.iter().product::<usize>() as u64,
                kind: if out.is_empty() {
                    LayerKind::Input
                } else {
                    LayerKind::Spiking
                },
            });
        }
    }
    out.push(Geometry {
        fan_in: model.head.weight.shape()[1] as u64,
        fan_out_entries: model.classes() as u64,
        kind: LayerKind::Head,
    });
    out
}

/// Counts operations of a T-step bit-serial inference.
///
/// `densities[l][t]` is the spike density of block `l`'s output at step `t`;
/// it drives the accumulates of the following layer. Per layer:
/// `ACs = Σ_t s_t·k²·c_in·c_out·H·W`, `input_shifts = c_out·H·W·T`,
/// `threshold_shifts = T`, `comparisons = resets = neurons·T`. The first block
/// performs `k²·c_in·c_out·H·W` multiply-accumulates once on the analog input;
/// the head accumulates and shifts but neither compares nor resets.
pub fn count_ops(model: &AnnModel, densities: &[Vec<f64>], timesteps: u32) -> Result<OpCounts> {
    let geo = geometries(model);
    let blocks = geo.len() - 1;
    if densities.len() != blocks {
        return Err(AnalyzeError::Invalid(format!(
            "{} density rows for {blocks} blocks",
            densities.len()
        )));
    }
    for (l, row) in densities.iter().enumerate() {
        if row.len() != timesteps as usize {
            return Err(AnalyzeError::Invalid(format!(
                "block {l}: {} densities for T = {timesteps}",
                row.len()
            )));
        }
        if let Some(d) = row.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(AnalyzeError::Invalid(format!(
                "block {l}: density {d} outside [0, 1]"
            )));
        }
    }
    let t = timesteps as f64;
    let layers = geo
        .iter()
        .enumerate()
        .map(|(l, g)| {
            let entries = g.fan_out_entries as f64;
            let synapses = g.fan_in as f64 * entries;
            let (macs, acs, density) = match g.kind {
                LayerKind::Input => (synapses, 0.0, 1.0),
                _ => {
                    let row = &densities[l - 1];
                    let s: f64 = row.iter().sum();
                    (0.0, s * synapses, s / t)
                }
            };
            let (input_shifts, threshold_shifts, neuron_ops) = match g.kind {
                LayerKind::Input => (0.0, t, entries * t),
                LayerKind::Spiking => (entries * t, t, entries * t),
                LayerKind::Head => (entries * t, 0.0, 0.0),
            };
            LayerOps {
                layer: l,
                kind: g.kind,
                neurons: g.fan_out_entries,
                input_density: density,
                macs,
                acs,
                input_shifts,
                threshold_shifts,
                comparisons: neuron_ops,
                resets: neuron_ops,
            }
        })
        .collect();
    Ok(OpCounts { timesteps, layers })
}

/// `s·k²·c_in`: accumulates per input shift of one current entry.
pub fn ac_per_shift_ratio(density: f64, kernel: usize, c_in: usize) -> f64 {
    density * (kernel * kernel * c_in) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub layer: usize,
    pub kind: LayerKind,
    pub mac_pj: f64,
    pub ac_pj: f64,
    pub shift_pj: f64,
    pub compare_pj: f64,
    pub reset_pj: f64,
    pub total_pj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub width: u32,
    pub costs: OpEnergy,
    pub ops: OpCounts,
    pub layers: Vec<LayerEnergy>,
    pub total_pj: f64,
    pub shift_pj: f64,
    /// `shift_pj / total_pj`.
    pub shift_share: f64,
}

pub fn estimate_energy(ops: &OpCounts, table: &EnergyTable, width: u32) -> Result<EnergyReport> {
    let c = *table.get(width)?;
    let layers: Vec<LayerEnergy> = ops
        .layers
        .iter()
        .map(|o| {
            let mac_pj = o.macs * (c.mult + c.add);
            let ac_pj = o.acs * c.add;
            let shift_pj = (o.input_shifts + o.threshold_shifts) * c.shift;
            let compare_pj = o.comparisons * c.compare;
            let reset_pj = o.resets * c.add;
            LayerEnergy {
                layer: o.layer,
                kind: o.kind,
                mac_pj,
                ac_pj,
                shift_pj,
                compare_pj,
                reset_pj,
                total_pj: mac_pj + ac_pj + shift_pj + compare_pj + reset_pj,
            }
        })
        .collect();
    let total_pj: f64 = layers.iter().map(|l| l.total_pj).sum();
    let shift_pj: f64 = layers.iter().map(|l| l.shift_pj).sum();
    Ok(EnergyReport {
        width,
        costs: c,
        ops: ops.clone(),
        layers,
        total_pj,
        shift_pj,
        shift_share: if total_pj > 0.0 { shift_pj / total_pj } else { 0.0 },
    })
}
