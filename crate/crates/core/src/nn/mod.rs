//! Minimal differentiable building blocks: layers, sequential stacks, Adam and checkpoints.

pub mod checkpoint;
pub mod diff;
pub mod layers;
pub mod optim;
pub mod sequential;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use diff::{grad_input, grad_params, Differentiable, Parameterized, ScalarLoss};
pub use layers::{BatchNorm2d, Conv2d, Layer, Linear, Mode};
pub use optim::{Adam, AdamConfig};
pub use sequential::{Sequential, Tape};

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
