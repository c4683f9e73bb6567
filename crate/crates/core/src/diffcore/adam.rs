use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators for every tensor of a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update from the accumulated gradients, which
    /// are zeroed afterwards.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                shapes: format!(
                    "{} tensors in state, {} in params",
                    self.first.len(),
                    params.len()
                ),
            });
        }
        for (slot, (name, t)) in params.iter().enumerate() {
            if t.len() != self.first[slot].len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    shapes: format!(
                        "{name}: state {} vs param {}",
                        self.first[slot].len(),
                        t.len()
                    ),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (slot, (_, t)) in params.iter_mut().enumerate() {
            let grad: Vec<f64> = match t.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
            for (i, (w, g)) in t.values_mut().iter_mut().zip(&grad).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            t.zero_grad();
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> Result<()> {
    state.step(params)
}
