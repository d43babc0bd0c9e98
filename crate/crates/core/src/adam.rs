//! Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// `shapes` gives the length of each parameter tensor.
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with the configured learning rate.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }

    /// One update with an explicit learning rate (for schedules).
    pub fn step_with_lr(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        ensure_len(self.first.len(), params.len())?;
        ensure_len(self.first.len(), grads.len())?;
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            ensure_len(self.first[i].len(), p.len())?;
            ensure_len(self.first[i].len(), g.len())?;
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay, .. } = self.config;
        let c1 = 1.0 / (1.0 - beta1.powi(self.step as i32));
        let c2 = 1.0 / (1.0 - beta2.powi(self.step as i32));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((pj, gj), mj), vj) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let update = (*mj * c1) / ((*vj * c2).sqrt() + eps);
                *pj -= lr * (update + weight_decay * *pj);
            }
        }
        Ok(())
    }
}
