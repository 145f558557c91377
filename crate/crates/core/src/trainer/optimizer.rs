use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::policy::{GradBuffer, OptimizerSnapshot};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !in_unit(self.beta1) || !in_unit(self.beta2) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(
                "optimizer needs betas in [0, 1), eps > 0 and weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay, stepping along an ascent direction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Self {
        AdamW {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn from_snapshot(config: OptimizerConfig, snapshot: OptimizerSnapshot) -> Self {
        AdamW {
            config,
            m: snapshot.m,
            v: snapshot.v,
            step: snapshot.step,
        }
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `params += lr · m̂ / (√v̂ + eps) − lr · weight_decay · params`.
    pub fn step(&mut self, params: &mut [f64], ascent: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(ascent.len(), self.m.len());
        let OptimizerConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(ascent).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
            *p += lr * update - lr * weight_decay * *p;
        }
    }
}

/// Linear warm-up from 0, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let lr = config.learning_rate;
    let warmup = config.warmup_steps;
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    let total = config.total_steps;
    if total <= warmup {
        return lr;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescales `grad` in place to norm `threshold` when it is longer.
pub fn clip_global_norm(grad: &mut GradBuffer, threshold: f64) {
    let norm = grad.norm();
    if norm > threshold {
        grad.scale(threshold / norm);
    }
}
