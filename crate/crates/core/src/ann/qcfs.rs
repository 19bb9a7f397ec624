//! Quantization-clip-floor-shift activation.
//!
//! `a = (λ/Q) · clip(⌊z·Q/λ + 1/2⌋, 0, clip_hi)`. The integer level is always
//! computed in f64 so that the f32 and f64 model paths agree on every code
//! that is not within f32 roundoff of a rounding boundary.

use serde::{Deserialize, Serialize};

use super::{AnnError, Result};
use crate::tensor::{self, Scalar, Tensor};

/// Tolerance, in units of one quantization step, for accepting a value as
/// lying on the activation grid.
pub const GRID_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QcfsActivation {
    pub lambda: f32,
    pub q_steps: u32,
    pub clip_hi: u32,
}

impl QcfsActivation {
    pub fn new(lambda: f32, q_steps: u32, clip_hi: u32) -> Result<Self> {
        let act = Self {
            lambda,
            q_steps,
            clip_hi,
        };
        act.validate()?;
        Ok(act)
    }

    /// Ceiling at `(Q-1)λ/Q`, the form a T = log2(Q) bit spike train can
    /// represent exactly.
    pub fn exact(lambda: f32, q_steps: u32) -> Result<Self> {
        Self::new(lambda, q_steps, q_steps.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(AnnError::Invalid(format!(
                "QCFS threshold must be positive and finite, got {}",
                self.lambda
            )));
        }
        if self.q_steps < 2 || !self.q_steps.is_power_of_two() {
            return Err(AnnError::Invalid(format!(
                "quantization steps must be a power of two >= 2, got {}",
                self.q_steps
            )));
        }
        if self.clip_hi != self.q_steps && self.clip_hi + 1 != self.q_steps {
            return Err(AnnError::Invalid(format!(
                "clip_hi must be Q or Q-1 (Q = {}), got {}",
                self.q_steps, self.clip_hi
            )));
        }
        Ok(())
    }

    /// `log2(Q)`: the number of bits in one activation.
    pub fn bits(&self) -> u32 {
        self.q_steps.trailing_zeros()
    }

    pub fn is_exact(&self) -> bool {
        self.clip_hi + 1 == self.q_steps
    }

    /// Integer level of one pre-activation.
    pub fn level(&self, z: f64) -> u32 {
        level(z, self.lambda as f64, self.q_steps, self.clip_hi)
    }

    pub fn forward<S: Scalar>(&self, z: &Tensor<S>) -> Tensor<S> {
        let lam = self.lambda as f64;
        let q = self.q_steps as f64;
        z.map(|v| S::from_f64(lam * self.level(v.as_f64()) as f64 / q))
    }

    /// The T bit planes of an on-grid activation tensor, most significant
    /// first, so that `a = Σ_t plane_t · λ/2^t`.
    pub fn bit_planes<S: Scalar>(&self, a: &Tensor<S>, timesteps: u32) -> Result<Vec<Tensor<S>>> {
        if timesteps != self.bits() {
            return Err(AnnError::Invalid(format!(
                "bit split needs T = log2(Q) = {}, got {timesteps}",
                self.bits()
            )));
        }
        let codes = self.grid_codes(a)?;
        Ok((1..=timesteps)
            .map(|t| {
                let shift = timesteps - t;
                let data = codes
                    .iter()
                    .map(|&c| if (c >> shift) & 1 == 1 { S::one() } else { S::zero() })
                    .collect();
                Tensor::new(a.shape().to_vec(), data).expect("bit plane shape")
            })
            .collect())
    }

    /// Integer codes of an activation tensor, rejecting off-grid values and
    /// codes that do not fit in `log2(Q)` bits.
    pub fn grid_codes<S: Scalar>(&self, a: &Tensor<S>) -> Result<Vec<u32>> {
        let scale = self.q_steps as f64 / self.lambda as f64;
        let max = self.q_steps - 1;
        a.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let x = v.as_f64() * scale;
                let code = x.round();
                if (x - code).abs() > GRID_TOL || code < 0.0 || code > max as f64 {
                    return Err(AnnError::OffGrid {
                        index: i,
                        value: v.as_f64(),
                        step: self.lambda as f64 / self.q_steps as f64,
                    });
                }
                Ok(code as u32)
            })
            .collect()
    }
}

/// `clip(⌊z·Q/λ + 1/2⌋, 0, clip_hi)`.
pub fn level(z: f64, lambda: f64, q_steps: u32, clip_hi: u32) -> u32 {
    let x = (z * q_steps as f64 / lambda + 0.5).floor();
    if x <= 0.0 {
        0
    } else if x >= clip_hi as f64 {
        clip_hi
    } else {
        x as u32
    }
}

fn check_lambda(lambda: f32) -> tensor::Result<()> {
    if !(lambda > 0.0) {
        return Err(tensor::TensorError::Invalid {
            op: "qcfs",
            msg: format!("threshold must be positive, got {lambda}"),
        });
    }
    Ok(())
}

pub(crate) fn forward_values(
    z: &Tensor,
    lambda: f32,
    q_steps: u32,
    clip_hi: u32,
) -> tensor::Result<Tensor> {
    check_lambda(lambda)?;
    let lam = lambda as f64;
    Ok(z.map(|v| (lam * level(v as f64, lam, q_steps, clip_hi) as f64 / q_steps as f64) as f32))
}

/// Straight-through gradients: `dz = up·1{0<z<λ}` and
/// `dλ = Σ up·(a − z·1{0<z<λ})/λ`.
pub(crate) fn backward_values(
    z: &Tensor,
    lambda: f32,
    q_steps: u32,
    clip_hi: u32,
    upstream: &Tensor,
) -> tensor::Result<(Tensor, f32)> {
    check_lambda(lambda)?;
    z.expect_same_shape(upstream, "qcfs_backward")?;
    let a = forward_values(z, lambda, q_steps, clip_hi)?;
    let mut dlam = 0.0f64;
    let dz = z.zip_map(upstream, "qcfs_backward", |zi, up| {
        if zi > 0.0 && zi < lambda {
            up
        } else {
            0.0
        }
    })?;
    for ((&zi, &ai), &up) in z.data().iter().zip(a.data()).zip(upstream.data()) {
        let inside = zi > 0.0 && zi < lambda;
        let zpart = if inside { zi as f64 } else { 0.0 };
        dlam += up as f64 * (ai as f64 - zpart) / lambda as f64;
    }
    Ok((dz, dlam as f32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn forward_examples() {
        let act = QcfsActivation::exact(1.0, 16).unwrap();
        let out = act.forward(&t(&[0.4, -0.3, 5.0]));
        assert_eq!(out.data(), &[0.375, 0.0, 0.9375]);
        let full = QcfsActivation::new(1.0, 16, 16).unwrap();
        assert_eq!(full.forward(&t(&[5.0])).data(), &[1.0]);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(QcfsActivation::exact(0.0, 16).is_err());
        assert!(QcfsActivation::exact(-1.0, 16).is_err());
        assert!(QcfsActivation::exact(1.0, 12).is_err());
        assert!(QcfsActivation::new(1.0, 16, 14).is_err());
        assert!(forward_values(&t(&[1.0]), 0.0, 16, 15).is_err());
    }

    #[test]
    fn bit_planes_examples() {
        let act = QcfsActivation::exact(1.0, 16).unwrap();
        let a = t(&[13.0 / 16.0, 0.0, 15.0 / 16.0]);
        let planes = act.bit_planes(&a, 4).unwrap();
        let col = |i: usize| planes.iter().map(|p| p.data()[i]).collect::<Vec<_>>();
        assert_eq!(col(0), vec![1.0, 1.0, 0.0, 1.0]);
        assert_eq!(col(1), vec![0.0; 4]);
        assert_eq!(col(2), vec![1.0; 4]);
    }

    #[test]
    fn bit_planes_reject_off_grid_and_wrong_t() {
        let act = QcfsActivation::exact(1.0, 16).unwrap();
        assert!(matches!(
            act.bit_planes(&t(&[0.3]), 4),
            Err(AnnError::OffGrid { .. })
        ));
        assert!(act.bit_planes(&t(&[0.25]), 3).is_err());
        // level 16 does not fit in four bits
        assert!(act.bit_planes(&t(&[1.0]), 4).is_err());
    }

    #[test]
    fn backward_examples() {
        let z = t(&[0.5, -1.0, 2.0]);
        let up = t(&[1.0, 1.0, 1.0]);
        let (dz, _) = backward_values(&z, 1.0, 16, 15, &up).unwrap();
        assert_eq!(dz.data(), &[1.0, 0.0, 0.0]);
    }

    /// Frozen-residual surrogate: inside (0, λ) the rounding residual is held
    /// fixed, elsewhere the clipped level is held fixed.
    fn surrogate(z: &[f64], lambda: f64, lambda0: f64, q: u32, hi: u32, up: &[f64]) -> f64 {
        z.iter()
            .zip(up)
            .map(|(&zi, &u)| {
                let code = level(zi, lambda0, q, hi) as f64;
                let a = if zi > 0.0 && zi < lambda0 {
                    let resid = code - zi * q as f64 / lambda0;
                    zi + lambda * resid / q as f64
                } else {
                    lambda * code / q as f64
                };
                u * a
            })
            .sum()
    }

    #[test]
    fn lambda_gradient_matches_surrogate_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for hi in [15, 16] {
            for _ in 0..20 {
                let lam: f32 = rng.random_range(0.5..2.0);
                let z: Vec<f32> = (0..32).map(|_| rng.random_range(-0.5..2.5)).collect();
                let up: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
                let (_, dl) = backward_values(&t(&z), lam, 16, hi, &t(&up)).unwrap();
                let zd: Vec<f64> = z.iter().map(|&v| v as f64).collect();
                let ud: Vec<f64> = up.iter().map(|&v| v as f64).collect();
                let l0 = lam as f64;
                let h = 1e-4;
                let fd = (surrogate(&zd, l0 + h, l0, 16, hi, &ud)
                    - surrogate(&zd, l0 - h, l0, 16, hi, &ud))
                    / (2.0 * h);
                let rel = (dl as f64 - fd).abs() / fd.abs().max(1e-3);
                assert!(rel <= 1e-3, "analytic {dl} vs fd {fd}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn monotone_bounded_idempotent(
            mut zs in proptest::collection::vec(-3.0f32..3.0, 1..40),
            lam in 0.1f32..3.0,
            exact in proptest::bool::ANY,
        ) {
            let act = if exact {
                QcfsActivation::exact(lam, 16).unwrap()
            } else {
                QcfsActivation::new(lam, 16, 16).unwrap()
            };
            zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let a = act.forward(&t(&zs));
            let top = act.clip_hi as f64 * lam as f64 / 16.0;
            for w in a.data().windows(2) {
                proptest::prop_assert!(w[0] <= w[1]);
            }
            for &v in a.data() {
                proptest::prop_assert!(v >= 0.0 && (v as f64) <= top + 1e-6);
            }
            proptest::prop_assert_eq!(act.forward(&a), a);
        }

        #[test]
        fn bit_planes_reconstruct(codes in proptest::collection::vec(0u32..16, 1..40), lam in 0.1f32..3.0) {
            let act = QcfsActivation::exact(lam, 16).unwrap();
            let a = t(&codes.iter().map(|&c| (lam as f64 * c as f64 / 16.0) as f32).collect::<Vec<_>>());
            let planes = act.bit_planes(&a, 4).unwrap();
            for (i, &v) in a.data().iter().enumerate() {
                let r: f64 = planes
                    .iter()
                    .enumerate()
                    .map(|(k, p)| p.data()[i] as f64 * lam as f64 / f64::powi(2.0, k as i32 + 1))
                    .sum();
                proptest::prop_assert_eq!(r as f32, v);
            }
        }
    }
}
