use serde::{Deserialize, Serialize};

use super::Parameterized;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Multiplicative decay applied every `decay_every_epochs`; 1 disables it.
    #[serde(default = "one")]
    pub decay_rate: f64,
    #[serde(default = "one_usize")]
    pub decay_every_epochs: usize,
    #[serde(default = "default_rho")]
    pub rmsprop_rho: f64,
    #[serde(default = "default_epsilon")]
    pub rmsprop_epsilon: f64,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn default_rho() -> f64 {
    0.9
}

fn default_epsilon() -> f64 {
    1e-10
}

impl OptimizerConfig {
    /// Plain SGD without decay.
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            decay_rate: 1.0,
            decay_every_epochs: 1,
            rmsprop_rho: default_rho(),
            rmsprop_epsilon: default_epsilon(),
        }
    }

    /// RMSprop with a staircase decay schedule.
    pub fn rmsprop(learning_rate: f64, decay_rate: f64, decay_every_epochs: usize) -> Self {
        Self {
            kind: OptimizerKind::Rmsprop,
            learning_rate,
            decay_rate,
            decay_every_epochs,
            rmsprop_rho: default_rho(),
            rmsprop_epsilon: default_epsilon(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.decay_rate.is_finite() && self.decay_rate > 0.0) {
            return bad(format!("decay_rate must be > 0, got {}", self.decay_rate));
        }
        if self.decay_every_epochs == 0 {
            return bad("decay_every_epochs must be >= 1".into());
        }
        if !(self.rmsprop_rho > 0.0 && self.rmsprop_rho < 1.0) {
            return bad(format!(
                "rmsprop_rho must be in (0, 1), got {}",
                self.rmsprop_rho
            ));
        }
        if !(self.rmsprop_epsilon.is_finite() && self.rmsprop_epsilon > 0.0) {
            return bad(format!(
                "rmsprop_epsilon must be > 0, got {}",
                self.rmsprop_epsilon
            ));
        }
        Ok(())
    }

    /// `lr * decay^floor(epoch / decay_every)`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.decay_every_epochs) as i32;
        self.learning_rate * self.decay_rate.powi(steps)
    }
}

/// Optimizer with per-buffer state, bound to one model's parameter layout.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    mean_square: Vec<Vec<f64>>,
    epoch: usize,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            mean_square: Vec::new(),
            epoch: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn current_learning_rate(&self) -> f64 {
        self.config.learning_rate_at(self.epoch)
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step<M: Parameterized>(&mut self, model: &mut M, grads: &M::Grads) -> Result<()> {
        let grad_bufs = model.grad_buffers(grads);
        {
            let params = model.params();
            if params.len() != grad_bufs.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} parameter buffers but {} gradient buffers",
                    params.len(),
                    grad_bufs.len()
                )));
            }
            for ((name, p), g) in params.iter().zip(&grad_bufs) {
                if p.len() != g.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "gradient for `{name}` has {} values, parameter has {}",
                        g.len(),
                        p.len()
                    )));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(name.clone()));
                }
            }
        }
        if self.config.kind == OptimizerKind::Rmsprop && self.mean_square.is_empty() {
            self.mean_square = grad_bufs.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        let lr = self.current_learning_rate();
        let (rho, eps) = (self.config.rmsprop_rho, self.config.rmsprop_epsilon);
        for (slot, ((_, p), g)) in model.params_mut().into_iter().zip(&grad_bufs).enumerate() {
            match self.config.kind {
                OptimizerKind::Sgd => {
                    for (pi, gi) in p.iter_mut().zip(g.iter()) {
                        *pi -= lr * gi;
                    }
                }
                OptimizerKind::Rmsprop => {
                    let ms = &mut self.mean_square[slot];
                    for ((pi, gi), mi) in p.iter_mut().zip(g.iter()).zip(ms.iter_mut()) {
                        *mi = rho * *mi + (1.0 - rho) * gi * gi;
                        *pi -= lr * gi / (*mi + eps).sqrt();
                    }
                }
            }
        }
        Ok(())
    }
}
