//! First-order optimizers that return the step delta instead of applying it.
//!
//! Callers may transform the delta (the slow phase projects it) before adding
//! it to the parameter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerConfig {
            kind,
            lr,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!("learning rate must be positive, got {}", self.lr)));
        }
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.momentum) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::contract("optimizer moments must lie in [0, 1) and eps > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state keyed by parameter identity.
#[derive(Debug, Clone)]
pub struct Optimizer<K: Ord> {
    cfg: OptimizerConfig,
    step: u64,
    slots: BTreeMap<K, Slot>,
}

impl<K: Ord + Clone> Optimizer<K> {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            step: 0,
            slots: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once before the deltas of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Parameter change for gradient `grad` at the current step.
    pub fn delta(&mut self, key: &K, grad: &[f64]) -> Vec<f64> {
        let cfg = self.cfg;
        let t = self.step.max(1) as i32;
        match cfg.kind {
            OptimizerKind::Sgd => grad.iter().map(|g| -cfg.lr * g).collect(),
            OptimizerKind::SgdMomentum => {
                let slot = self.slot(key, grad.len());
                slot.m
                    .iter_mut()
                    .zip(grad)
                    .map(|(m, g)| {
                        *m = cfg.momentum * *m + g;
                        -cfg.lr * *m
                    })
                    .collect()
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - cfg.beta1.powi(t);
                let c2 = 1.0 - cfg.beta2.powi(t);
                let slot = self.slot(key, grad.len());
                slot.m
                    .iter_mut()
                    .zip(slot.v.iter_mut())
                    .zip(grad)
                    .map(|((m, v), g)| {
                        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                        -cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps)
                    })
                    .collect()
            }
        }
    }

    fn slot(&mut self, key: &K, len: usize) -> &mut Slot {
        let slot = self.slots.entry(key.clone()).or_insert_with(|| Slot {
            m: vec![0.0; len],
            v: vec![0.0; len],
        });
        debug_assert_eq!(slot.m.len(), len);
        slot
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_is_scaled_negative_gradient() {
        let mut opt = Optimizer::<usize>::new(OptimizerConfig::new(OptimizerKind::Sgd, 0.5)).unwrap();
        opt.begin_step();
        assert_eq!(opt.delta(&0, &[2.0, -4.0]), vec![-1.0, 2.0]);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let mut opt = Optimizer::<usize>::new(OptimizerConfig::adam(0.01)).unwrap();
        opt.begin_step();
        let d = opt.delta(&0, &[3.0, -1e-3]);
        assert!((d[0] + 0.01).abs() < 1e-9);
        assert!((d[1] - 0.01).abs() < 1e-7);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = Optimizer::<usize>::new(OptimizerConfig::new(OptimizerKind::SgdMomentum, 1.0)).unwrap();
        opt.begin_step();
        opt.delta(&0, &[1.0]);
        opt.begin_step();
        assert!((opt.delta(&0, &[1.0])[0] + 1.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_lr() {
        assert!(Optimizer::<usize>::new(OptimizerConfig::adam(0.0)).is_err());
    }
}
