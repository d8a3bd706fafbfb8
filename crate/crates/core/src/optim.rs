use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub init_lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            init_lr: 0.05,
            lr_milestones: vec![150, 180, 210],
            lr_gamma: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, total_epochs: usize) -> Result<()> {
        let positive = [self.momentum, self.weight_decay, self.init_lr, self.lr_gamma];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.batch_size == 0 {
            return Err(Error::Config(
                "optimizer momentum, weight_decay, init_lr, lr_gamma and batch_size must be positive".into(),
            ));
        }
        if self.lr_milestones.iter().any(|&m| m == 0 || m >= total_epochs) {
            return Err(Error::Config(format!(
                "optimizer.lr_milestones {:?} must lie in 1..{total_epochs}",
                self.lr_milestones
            )));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("optimizer.lr_milestones must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// `init_lr · gamma^(milestones ≤ epoch)`.
pub fn lr_at(epoch: usize, cfg: &OptimizerConfig) -> f64 {
    let decays = cfg.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.init_lr * cfg.lr_gamma.powi(decays as i32)
}

/// SGD with momentum and coupled weight decay:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
///
/// Velocity exists only for the parameters it was built over; stepping a
/// network whose trainable set differs is an error.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    /// Fresh (zero-momentum) state over the network's trainable parameters.
    pub fn new(cfg: &OptimizerConfig, net: &mut Network) -> Self {
        let velocity = net
            .trainable_params_mut()
            .into_iter()
            .map(|p| (p.name.clone(), vec![0.0; p.len()]))
            .collect();
        Sgd {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity,
        }
    }

    pub fn from_state(cfg: &OptimizerConfig, velocity: BTreeMap<String, Vec<f64>>) -> Self {
        Sgd {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity,
        }
    }

    pub fn velocity(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.velocity
    }

    pub fn param_ids(&self) -> impl Iterator<Item = &String> {
        self.velocity.keys()
    }

    pub fn step(&mut self, net: &mut Network, lr: f64) -> Result<()> {
        let params = net.trainable_params_mut();
        if params.len() != self.velocity.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, network trains {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for p in params {
            let v = self
                .velocity
                .get_mut(&p.name)
                .ok_or_else(|| Error::Contract(format!("no optimizer state for {}", p.name)))?;
            for ((w, g), m) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                let d = g + self.weight_decay * *w;
                *m = self.momentum * *m + d;
                *w -= lr * *m;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule() {
        let cfg = OptimizerConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.05);
        assert_eq!(lr_at(149, &cfg), 0.05);
        assert!((lr_at(150, &cfg) - 0.005).abs() < 1e-15);
        assert!((lr_at(180, &cfg) - 0.0005).abs() < 1e-15);
        assert!((lr_at(239, &cfg) - 0.00005).abs() < 1e-15);
    }

    #[test]
    fn milestones_must_fit_the_run() {
        let cfg = OptimizerConfig::default();
        assert!(cfg.validate(240).is_ok());
        assert!(cfg.validate(200).is_err());
        let zero = OptimizerConfig { batch_size: 0, ..Default::default() };
        assert!(zero.validate(240).is_err());
    }
}
