use super::net::MicroSegNet;
use crate::error::{Error, Result};

/// SGD hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 0.01,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Momentum SGD under a poly learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
    pub base_lr: f64,
    pub power: f64,
    pub iter: usize,
    pub iter_max: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(net: &MicroSegNet, cfg: &OptimConfig, iter_max: usize) -> Result<Self> {
        if !(cfg.base_lr >= 0.0 && cfg.power >= 0.0 && cfg.weight_decay >= 0.0) {
            return Err(Error::Config("base_lr, power and weight_decay must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&cfg.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", cfg.momentum)));
        }
        Ok(OptimizerState {
            velocity: net.params().iter().map(|t| vec![0.0; t.numel()]).collect(),
            base_lr: cfg.base_lr,
            power: cfg.power,
            iter: 0,
            iter_max,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        })
    }
}

/// `base_lr · (1 − iter/iter_max)^power`; zero once the schedule is exhausted.
pub fn poly_lr(state: &OptimizerState) -> f64 {
    if state.iter_max == 0 || state.iter >= state.iter_max {
        return 0.0;
    }
    state.base_lr * (1.0 - state.iter as f64 / state.iter_max as f64).powf(state.power)
}

/// `v ← m·v + g + wd·θ; θ ← θ − lr·v` over the network's parameters.
pub fn sgd_step(net: &mut MicroSegNet, grads: &[Vec<f64>], opt: &mut OptimizerState) -> Result<()> {
    let mut params: Vec<&mut [f64]> = net.params_mut().into_iter().map(|t| t.data_mut()).collect();
    sgd_update(&mut params, grads, opt)
}

/// The update behind [`sgd_step`] on raw slices. The learning rate is taken
/// before `iter` advances.
pub fn sgd_update(params: &mut [&mut [f64]], grads: &[Vec<f64>], opt: &mut OptimizerState) -> Result<()> {
    if grads.len() != params.len() || opt.velocity.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} parameters but {} gradients and {} momentum buffers",
            params.len(),
            grads.len(),
            opt.velocity.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || opt.velocity[i].len() != g.len() {
            return Err(Error::Dimension(format!(
                "parameter {i} has {} values but its gradient has {}",
                p.len(),
                g.len()
            )));
        }
    }
    let lr = poly_lr(opt);
    let (m, wd) = (opt.momentum, opt.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(opt.velocity.iter_mut()) {
        for ((theta, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = m * *vi + gi + wd * *theta;
            *theta -= lr * *vi;
        }
    }
    opt.iter = (opt.iter + 1).min(opt.iter_max);
    Ok(())
}
