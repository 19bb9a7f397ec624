mod common;

use bitspike::ann::checkpoint::{load_snn, save_snn};
use bitspike::ann::{AnnModel, Architecture, Layer};
use bitspike::convert::{
    check_condition_i, check_condition_i_exhaustive, convert, convert_baseline, shift_bn_bias,
    verify_lossless, ConvertError,
};
use bitspike::tensor::Tensor;
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Spatial size of each block's input.
fn block_input_hw(ann: &AnnModel) -> Vec<[usize; 2]> {
    let shapes = ann.layer_shapes();
    let mut hw = [ann.input_shape[1], ann.input_shape[2]];
    let mut out = Vec::new();
    for (layer, shape) in ann.layers.iter().zip(shapes) {
        if matches!(layer, Layer::Block(_)) {
            out.push(hw);
        }
        hw = [shape[1], shape[2]];
    }
    out
}

#[test]
fn random_models_convert_losslessly_in_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..20 {
        let ann = random_model(&mut rng);
        let snn = convert(&ann, 4, true).unwrap();
        let x = rand_tensor(&mut rng, &[4, 3, 8, 8], 0.0, 1.0).cast::<f64>();
        let r = verify_lossless(&ann, &snn, &x).unwrap();
        assert!(r.bits_equal(), "{r:?}");
        assert!(r.max_deviation <= 1e-8, "{r:?}");
    }
}

#[test]
fn fewer_steps_than_bits_loses_information() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let ann = random_model(&mut rng);
        let snn = convert(&ann, 3, false).unwrap();
        let x = rand_tensor(&mut rng, &[4, 3, 8, 8], 0.0, 1.0);
        worst = worst.max(verify_lossless(&ann, &snn, &x).unwrap().max_deviation);
    }
    assert!(worst > 1e-2, "deviation {worst}");
}

#[test]
fn condition_i_holds_on_every_hidden_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for _ in 0..5 {
        let ann = random_model(&mut rng);
        let snn = convert(&ann, 4, true).unwrap();
        let hws = block_input_hw(&ann);
        for (i, (orig, shifted)) in ann.blocks().zip(snn.network.blocks()).enumerate().skip(1) {
            let d32 = check_condition_i(orig, &shifted.beta, hws[i], 4, 100, &mut rng).unwrap();
            let beta64: Vec<f64> = shift_bn_bias(&orig.beta, &orig.gamma, &orig.mu, &orig.sigma, 4).unwrap();
            let d64 = check_condition_i(orig, &beta64, hws[i], 4, 100, &mut rng).unwrap();
            assert!(d32 <= 1e-4, "block {i}: {d32}");
            assert!(d64 <= 1e-8, "block {i}: {d64}");
            let control = check_condition_i(orig, &orig.beta, hws[i], 4, 10, &mut rng).unwrap();
            assert!(control >= 1e-2, "block {i}: unshifted deviation {control}");
        }
    }
}

#[test]
fn condition_i_exhaustive_on_micro_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut arch = Architecture::new([2, 1, 1], vec![3], 2, 4);
    arch.kernel = 1;
    let ann = arch.random(&mut rng).unwrap();
    let block = ann.blocks().next().unwrap();
    let shifted: Vec<f64> = shift_bn_bias(&block.beta, &block.gamma, &block.mu, &block.sigma, 2).unwrap();
    let dev = check_condition_i_exhaustive(block, &shifted, [1, 1], 2).unwrap();
    assert!(dev <= 1e-6, "{dev}");
    let beta: Vec<f64> = block.beta.iter().map(|&b| b as f64).collect();
    let control = check_condition_i_exhaustive(block, &beta, [1, 1], 2).unwrap();
    assert!(control >= 1e-2, "{control}");
}

#[test]
fn snn_checkpoint_keeps_thresholds_and_shifted_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let ann = random_model(&mut rng);
    for snn in [convert(&ann, 4, true).unwrap(), convert_baseline(&ann, 8).unwrap()] {
        let back = load_snn(&save_snn(&snn)).unwrap();
        assert_eq!(back.thresholds, snn.thresholds);
        assert_eq!(back.timesteps, snn.timesteps);
        assert_eq!(back.neuron, snn.neuron);
        for (a, b) in back.network.blocks().zip(snn.network.blocks()) {
            assert_eq!(a.beta, b.beta);
            assert_eq!(a.weight, b.weight);
        }
        assert_eq!(back, snn);
    }
}

#[test]
fn exact_mode_needs_matching_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let ann = random_model(&mut rng);
    assert!(matches!(
        convert(&ann, 3, true),
        Err(ConvertError::TimestepMismatch { expected: 4, got: 3 })
    ));
    assert!(convert(&ann, 5, false).is_err());
}

#[test]
fn zero_network_outputs_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut ann = Architecture::new([3, 8, 8], vec![4, 4], 3, 16).init(&mut rng).unwrap();
    for b in ann.blocks_mut() {
        b.weight = Tensor::zeros(b.weight.shape());
    }
    ann.head.weight = Tensor::zeros(ann.head.weight.shape());
    let snn = convert(&ann, 4, true).unwrap();
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let r = verify_lossless(&ann, &snn, &x).unwrap();
    assert_eq!(r.max_deviation, 0.0);
    assert_eq!(r.logit_max_deviation, 0.0);
}
