//! Quantized-activation ANN training and lossless conversion to bit-serial
//! spiking networks.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyze;
pub mod ann;
pub mod convert;
pub mod snn;
pub mod tensor;
pub mod trainer;
