//! Per-step reward, the reward-versus-stopping-time curve and its argmax.
//!
//! Every step costs `mu`, including the step at which the model stops. A
//! stop at step `t` (1-based) therefore earns `-CE(y, yhat_t) - mu * t` in
//! total, and that quantity as a function of `t` is the reward curve.

use serde::{Deserialize, Serialize};

use crate::diffcore::cross_entropy;
use crate::error::{Error, Result};
use crate::model::PredictionTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Wait,
    Stop,
}

impl Action {
    /// Index into a `[wait, stop]` policy row.
    pub fn index(self) -> usize {
        match self {
            Action::Wait => crate::model::WAIT,
            Action::Stop => crate::model::STOP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub mu: f64,
    pub gamma: f64,
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::config(format!(
                "time penalty mu must be >= 0, got {}",
                self.mu
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!(
                "discount gamma must be in [0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Reward for taking `action` at 1-based step `t`.
///
/// Waiting costs `-mu`. Stopping, or reaching `t_end`, costs
/// `-mu - CE(y, yhat_t)`. Waiting at `t_end` is not allowed.
pub fn step_reward(
    action: Action,
    y: &[f64],
    yhat_t: &[f64],
    t: usize,
    t_end: usize,
    mu: f64,
) -> Result<f64> {
    if t == 0 || t > t_end {
        return Err(Error::invalid(format!("step {t} outside 1..={t_end}")));
    }
    match action {
        Action::Wait if t == t_end => Err(Error::invalid(
            "cannot wait at the final step; stopping is forced",
        )),
        Action::Wait => Ok(-mu),
        Action::Stop => Ok(-mu - cross_entropy(y, yhat_t)),
    }
}

/// `r_t = -CE(y, yhat_t) - mu * t` for `t = 1..=T_end`, stored 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardCurve {
    pub values: Vec<f64>,
}

impl RewardCurve {
    /// Curve from per-step cross-entropies.
    pub fn from_cross_entropies(ce: &[f64], mu: f64) -> Self {
        RewardCurve {
            values: ce
                .iter()
                .enumerate()
                .map(|(i, c)| -c - mu * (i + 1) as f64)
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn reward_curve(y: &[f64], trace: &PredictionTrace, mu: f64) -> RewardCurve {
    let ce: Vec<f64> = trace.yhat.iter().map(|q| cross_entropy(y, q)).collect();
    RewardCurve::from_cross_entropies(&ce, mu)
}

/// Earliest 1-based step attaining the curve's maximum.
///
/// # Panics
///
/// Panics on an empty curve.
pub fn optimal_stop_time(curve: &RewardCurve) -> usize {
    assert!(!curve.is_empty(), "reward curve must be non-empty");
    let mut best = 0;
    for (i, &r) in curve.values.iter().enumerate().skip(1) {
        if r > curve.values[best] {
            best = i;
        }
    }
    best + 1
}

/// `out_t = sum_{t' >= t} gamma^(t' - t) R_t'`, computed backwards.
pub fn discounted_future_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut running = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        running = r + gamma * running;
        *o = running;
    }
    out
}
