//! The segmentation network, its optimizer and checkpoints.

pub mod checkpoint;
mod net;
mod optim;

pub use net::{Bound, ConvLayer, MicroSegNet, Mode, ModelConfig};
pub use optim::{poly_lr, sgd_step, sgd_update, OptimConfig, OptimizerState};

use crate::numerics::Tape;

/// Gradients of every bound parameter after `tape.backward`; absent ones are zero.
pub fn collect_grads(tape: &Tape, bound: &Bound) -> Vec<Vec<f64>> {
    bound
        .vars
        .iter()
        .map(|&v| match tape.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(v).numel()],
        })
        .collect()
}

