//! AdamW with decoupled weight decay and a linear warmup.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, b) in [("train.optimizer.beta1", self.beta1), ("train.optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.optimizer.eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.optimizer.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Learning rate at 1-based `step`: ramps linearly from `lr / warmup` up to
/// `lr` over `warmup` steps, then stays constant.
pub fn scheduled_lr(lr: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        lr
    } else {
        lr * step as f64 / warmup as f64
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: usize,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update of every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.numel() != g.len() {
                return Err(Error::shape("adamw", p.shape(), &[g.len()]));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            }
            // A zero rate must leave parameters bit-identical, so skip the
            // arithmetic entirely (x - 0.0 * x can flip the sign of -0.0).
            if lr == 0.0 {
                continue;
            }
            let data = p.data_mut();
            for i in 0..g.len() {
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= lr * c.weight_decay * data[i];
                data[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn warmup_ramp() {
        assert_eq!(scheduled_lr(1.0, 1, 4), 0.25);
        assert_eq!(scheduled_lr(1.0, 4, 4), 1.0);
        assert_eq!(scheduled_lr(1.0, 100, 4), 1.0);
        assert_eq!(scheduled_lr(0.5, 1, 0), 0.5);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let grads = BTreeMap::from([("w".to_string(), vec![0.3, -4.0, 0.0])]);
        opt.step(&mut params, &grads, 0.1).unwrap();
        let w = params.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - -1.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn zero_rate_is_exact_noop() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new(vec![2], vec![-0.0, 3.0]).unwrap());
        let before = params.clone();
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads = BTreeMap::from([("w".to_string(), vec![1.0, -1.0])]);
        opt.step(&mut params, &grads, 0.0).unwrap();
        let (a, b) = (params.get("w").unwrap().data(), before.get("w").unwrap().data());
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
