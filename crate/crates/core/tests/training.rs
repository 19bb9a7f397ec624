mod common;

use bitspike::trainer::{accuracy, bit_density};
use common::*;

#[test]
fn desk_task_is_learned() {
    let (train_set, test_set) = desk_task();
    let (model, history) = train_desk(&train_set, 0.0);
    let last = history.epochs.last().unwrap();
    assert!(last.train_accuracy >= 0.95, "{last:?}");
    assert!(accuracy(&model, &test_set).unwrap() >= 0.9);
    assert!(history.epochs.iter().all(|e| e.sp_loss == 0.0));
}

#[test]
fn activity_penalty_lowers_bit_activity_monotonically() {
    let (train_set, _) = desk_task();
    let c = 1e-4;
    let densities: Vec<f64> = [0.0, c, 10.0 * c, 1e-1]
        .iter()
        .map(|&coeff| {
            let (model, _) = train_desk(&train_set, coeff);
            bit_density(&model, &train_set).unwrap()
        })
        .collect();
    assert!(densities[1] <= densities[0], "seed 5: {densities:?}");
    assert!(densities[2] <= densities[1], "seed 5: {densities:?}");
    assert!(densities[3] < densities[0], "seed 5: {densities:?}");
}
