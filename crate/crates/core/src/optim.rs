//! Adam and AdamW over a `ParameterTree`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use wfn_tensor::{Float, Tensor};

use crate::error::{invalid, Result};
use crate::params::ParameterTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid(format!("weight decay must be finite and >= 0, got {}", self.weight_decay)));
        }
        if self.kind == OptimizerKind::Adam && self.weight_decay != 0.0 {
            return Err(invalid("plain Adam applies no weight decay; use adamw"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(invalid("betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

/// First/second moment estimates keyed by parameter path.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Default for AdamState<T> {
    fn default() -> Self {
        Self {
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<T: Float> AdamState<T> {
    /// One update of every parameter that has an entry in `grads`.
    pub fn step(&mut self, config: &AdamConfig, tree: &mut ParameterTree<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        config.validate()?;
        for (path, g) in grads {
            let p = tree.tensor(path)?;
            if p.shape() != g.shape() {
                return Err(invalid(format!("gradient for `{path}` has shape {:?}, parameter {:?}", g.shape(), p.shape())));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2, lr) = (config.beta1, config.beta2, config.learning_rate);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let decay = match config.kind {
            OptimizerKind::AdamW => 1.0 - lr * config.weight_decay,
            OptimizerKind::Adam => 1.0,
        };
        for (path, g) in grads {
            let m = self.m.entry(path.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v.entry(path.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let p = tree.tensor_mut(path)?;
            for (((pi, mi), vi), gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                let g = gi.as_f64();
                let m_new = b1 * mi.as_f64() + (1.0 - b1) * g;
                let v_new = b2 * vi.as_f64() + (1.0 - b2) * g * g;
                *mi = T::from_f64_lossy(m_new);
                *vi = T::from_f64_lossy(v_new);
                let m_hat = mi.as_f64() / bc1;
                let v_hat = vi.as_f64() / bc2;
                let w = pi.as_f64() * decay;
                *pi = T::from_f64_lossy(w - lr * m_hat / (v_hat.sqrt() + config.eps));
            }
        }
        Ok(())
    }
}
