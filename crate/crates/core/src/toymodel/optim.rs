use serde::{Deserialize, Serialize};

use super::model::Params;
use crate::error::{Error, Result};

pub const DEFAULT_LEARNING_RATE: f64 = 2e-5;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    first: Params,
    second: Params,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &Params) -> Self {
        OptimizerState {
            config,
            first: Params::zeros_like(params),
            second: Params::zeros_like(params),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Non-finite gradients abort the step and leave
    /// both the parameters and the moments untouched.
    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        for (name, g) in grads.tensors() {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient {name}[{i}] = {}",
                    g[i]
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.learning_rate * c.weight_decay;
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
            for k in 0..p.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                p[k] = p[k] * decay - c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        Ok(())
    }
}
