use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adadelta with a per-epoch step decay of the learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    /// Learning-rate multiplier applied after every epoch.
    pub lr_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1.0,
            rho: 0.9,
            eps: 1e-6,
            lr_decay: 0.7,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && (0.0..1.0).contains(&self.rho) && self.eps > 0.0 && self.lr_decay > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// Per-parameter running averages of squared gradients and squared updates.
#[derive(Clone, Debug)]
pub struct Adadelta {
    rho: f32,
    eps: f32,
    state: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Adadelta {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Adadelta {
            rho: cfg.rho as f32,
            eps: cfg.eps as f32,
            state: Vec::new(),
        }
    }

    /// Updates `params[i]` with `grads[i]`; a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Option<Tensor<f32>>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.state.is_empty() {
            self.state = params
                .iter()
                .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
                .collect();
        }
        let (rho, eps, lr) = (self.rho, self.eps, lr as f32);
        for ((p, g), (sq_grad, sq_delta)) in params.iter_mut().zip(grads).zip(&mut self.state) {
            let Some(g) = g else { continue };
            for (((w, &gi), v), u) in p.data_mut().iter_mut().zip(g.data()).zip(sq_grad.iter_mut()).zip(sq_delta.iter_mut()) {
                *v = rho * *v + (1.0 - rho) * gi * gi;
                let delta = ((*u + eps).sqrt() / (*v + eps).sqrt()) * gi;
                *u = rho * *u + (1.0 - rho) * delta * delta;
                *w -= lr * delta;
            }
        }
    }
}
