//! Spike density per layer and per time step.

use serde::{Deserialize, Serialize};

use crate::snn::SnnTrace;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerActivity {
    pub layer: usize,
    pub neurons: usize,
    /// Fraction of neurons spiking at each emitted step.
    pub per_step: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikingActivity {
    pub timesteps: u32,
    pub layers: Vec<LayerActivity>,
    /// Spikes per neuron per step across all blocks.
    pub overall: f64,
}

impl SpikingActivity {
    /// `densities[l][t]` in the layout [`super::count_ops`] expects.
    pub fn densities(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.per_step.clone()).collect()
    }

    /// Combines batches, weighting each by its neuron count.
    pub fn merge(parts: &[SpikingActivity]) -> Option<SpikingActivity> {
        let first = parts.first()?;
        let mut layers = first.layers.clone();
        for (l, layer) in layers.iter_mut().enumerate() {
            let total: usize = parts.iter().map(|p| p.layers[l].neurons).sum();
            for t in 0..layer.per_step.len() {
                layer.per_step[t] = parts
                    .iter()
                    .map(|p| p.layers[l].per_step[t] * p.layers[l].neurons as f64)
                    .sum::<f64>()
                    / total.max(1) as f64;
            }
            layer.neurons = total;
            layer.mean = mean(&layer.per_step);
        }
        Some(SpikingActivity {
            timesteps: first.timesteps,
            overall: overall(&layers),
            layers,
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn overall(layers: &[LayerActivity]) -> f64 {
    let neurons: usize = layers.iter().map(|l| l.neurons).sum();
    if neurons == 0 {
        return 0.0;
    }
    layers.iter().map(|l| l.mean * l.neurons as f64).sum::<f64>() / neurons as f64
}

/// Fraction of ones across all `planes`.
pub fn plane_density<S: Scalar>(planes: &[Tensor<S>]) -> f64 {
    let total: usize = planes.iter().map(|p| p.numel()).sum();
    if total == 0 {
        return 0.0;
    }
    let ones: usize = planes
        .iter()
        .map(|p| p.data().iter().filter(|v| **v > S::zero()).count())
        .sum();
    ones as f64 / total as f64
}

pub fn spiking_activity<S: Scalar>(trace: &SnnTrace<S>) -> SpikingActivity {
    let layers: Vec<LayerActivity> = trace
        .layers
        .iter()
        .enumerate()
        .map(|(layer, lt)| {
            let neurons = lt.rate.numel();
            let per_step: Vec<f64> = lt
                .spikes
                .iter()
                .map(|s| plane_density(std::slice::from_ref(s)))
                .collect();
            LayerActivity {
                layer,
                neurons,
                mean: mean(&per_step),
                per_step,
            }
        })
        .collect();
    SpikingActivity {
        timesteps: trace.ledger.timesteps,
        overall: overall(&layers),
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(neurons: usize, per_step: Vec<f64>) -> LayerActivity {
        LayerActivity {
            layer: 0,
            neurons,
            mean: mean(&per_step),
            per_step,
        }
    }

    #[test]
    fn density_examples() {
        let zeros = Tensor::<f32>::zeros(&[2, 3]);
        assert_eq!(plane_density(&[zeros.clone(), zeros]), 0.0);
        let half = Tensor::new(vec![4], vec![1.0f32, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(plane_density(&[half]), 0.5);
        assert_eq!(plane_density::<f32>(&[]), 0.0);
    }

    #[test]
    fn merge_weights_by_neurons() {
        let a = SpikingActivity {
            timesteps: 2,
            layers: vec![layer(10, vec![1.0, 0.0])],
            overall: 0.5,
        };
        let b = SpikingActivity {
            timesteps: 2,
            layers: vec![layer(30, vec![0.0, 0.0])],
            overall: 0.0,
        };
        let m = SpikingActivity::merge(&[a, b]).unwrap();
        assert_eq!(m.layers[0].neurons, 40);
        assert_eq!(m.layers[0].per_step, vec![0.25, 0.0]);
        assert_eq!(m.overall, 0.125);
        assert!(SpikingActivity::merge(&[]).is_none());
    }
}
