use crate::error::{Error, Result};
use crate::layers::ParamStore;

/// `min + ½(init − min)(1 + cos(π·step/total))`; steps past the end stay at `min`.
pub fn cosine_annealing_lr(step: usize, total_steps: usize, initial_lr: f64, min_lr: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return min_lr;
    }
    let progress = step as f64 / total_steps as f64;
    min_lr + 0.5 * (initial_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            momentum,
            velocity: Vec::new(),
        })
    }

    /// Applies the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        }
        for (param, v) in params.iter_mut().zip(&mut self.velocity) {
            let Some(grad) = param.tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for ((vi, gi), pi) in v.iter_mut().zip(&grad).zip(param.tensor.values_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
            param.tensor.zero_grad();
        }
    }
}
