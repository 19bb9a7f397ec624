//! Integrate-and-fire neuron dynamics, scalar and elementwise.

use crate::tensor::{Scalar, Tensor};

/// Half of the finest threshold, `θ/2^(T+1)`, added to the accumulated
/// current so the bit-serial neuron rounds to nearest instead of truncating.
pub fn modified_offset<S: Scalar>(theta: S, timesteps: u32) -> S {
    theta * S::from_f64(f64::powi(0.5, timesteps as i32 + 1))
}

/// Threshold of step `t` (1-based): `θ/2^t`.
pub fn modified_threshold<S: Scalar>(theta: S, t: u32) -> S {
    theta * S::from_f64(f64::powi(0.5, t as i32))
}

/// Bit-serial neuron: at step t it spikes iff `u >= θ/2^t` and subtracts that
/// threshold on a spike. Returns the spikes (most significant first) and the
/// residual potential.
///
/// The emitted bits are the T-bit binary expansion of
/// `clip(⌊u_init·2^T/θ⌋, 0, 2^T − 1)`.
pub fn fire_modified<S: Scalar>(u_init: S, theta: S, timesteps: u32) -> (Vec<bool>, S) {
    let mut u = u_init;
    let spikes = (1..=timesteps)
        .map(|t| {
            let th = modified_threshold(theta, t);
            let fire = u >= th;
            if fire {
                u = u - th;
            }
            fire
        })
        .collect();
    (spikes, u)
}

/// Elementwise [`fire_modified`]: T binary planes (most significant first)
/// and the residual potential.
pub fn fire_modified_tensor<S: Scalar>(
    u_init: &Tensor<S>,
    theta: S,
    timesteps: u32,
) -> (Vec<Tensor<S>>, Tensor<S>) {
    let mut u = u_init.clone();
    let mut planes = Vec::with_capacity(timesteps as usize);
    for t in 1..=timesteps {
        let th = modified_threshold(theta, t);
        let mut plane = Tensor::zeros(u.shape());
        for (p, v) in plane.data_mut().iter_mut().zip(u.data_mut()) {
            if *v >= th {
                *p = S::one();
                *v = *v - th;
            }
        }
        planes.push(plane);
    }
    (planes, u)
}

/// One trace of the reset-by-subtraction IF neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineTrace<S> {
    pub spikes: Vec<bool>,
    /// `u(0), u(1), …, u(T)`.
    pub potentials: Vec<S>,
}

impl<S: Scalar> BaselineTrace<S> {
    /// `φ(T) = Σ_t s(t)·θ/T`.
    pub fn rate(&self, theta: S) -> S {
        let n = self.spikes.iter().filter(|&&s| s).count();
        theta * S::from_usize(n) / S::from_usize(self.spikes.len())
    }
}

/// Baseline IF neuron: `u(t) = u(t−1) + z(t) − s(t)·θ` with
/// `s(t) = H(u(t−1) + z(t) − θ)`, `H(0) = 0`.
pub fn fire_baseline<S: Scalar>(currents: &[S], theta: S, u0: S) -> BaselineTrace<S> {
    let mut u = u0;
    let mut potentials = vec![u0];
    let spikes = currents
        .iter()
        .map(|&z| {
            let v = u + z;
            let fire = v - theta > S::zero();
            u = if fire { v - theta } else { v };
            potentials.push(u);
            fire
        })
        .collect();
    BaselineTrace { spikes, potentials }
}

/// Layer of baseline neurons advanced one step at a time.
#[derive(Debug, Clone)]
pub struct BaselineLayer<S> {
    pub potential: Tensor<S>,
    pub theta: S,
}

impl<S: Scalar> BaselineLayer<S> {
    pub fn new(shape: &[usize], theta: S, u0: S) -> Self {
        Self {
            potential: Tensor::full(shape, u0),
            theta,
        }
    }

    /// Integrates one current plane and returns the spike plane.
    pub fn step(&mut self, current: &Tensor<S>) -> Tensor<S> {
        let mut plane = Tensor::zeros(self.potential.shape());
        for ((p, u), &z) in plane
            .data_mut()
            .iter_mut()
            .zip(self.potential.data_mut())
            .zip(current.data())
        {
            let v = *u + z;
            if v - self.theta > S::zero() {
                *p = S::one();
                *u = v - self.theta;
            } else {
                *u = v;
            }
        }
        plane
    }
}
