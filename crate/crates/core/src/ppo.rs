//! Clipped-surrogate policy optimization with a supervised classification
//! term.
//!
//! Episodes are rolled out by sampling the policy from a parameter
//! snapshot. The advantage at each visited step is the discounted sum of
//! the remaining rewards; there is no learned value baseline. The loss is
//! the mean classification cross-entropy over visited steps minus the mean
//! clipped surrogate over the steps where the policy made a choice.
//!
//! The step at `T_end` is a forced stop, not a sampled action. It carries
//! the terminal reward and a cross-entropy term but no surrogate term.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cis::argmax;
use crate::data::{one_hot, Dataset, Sample};
use crate::diffcore::{cross_entropy, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::larm::sample_stop_time;
use crate::model::{BatchTrace, BoundModel, ModelParams, PredictionTrace, STOP};
use crate::reward::{discounted_future_returns, step_reward, Action};
use crate::train::{
    batch_refs, check_common, check_dataset, label_matrix, minibatches, stream_rng, EpochStats,
    StatsAccumulator,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub mu: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Update passes per rollout batch.
    #[serde(default = "default_passes")]
    pub update_passes: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    0.2
}
fn default_passes() -> usize {
    1
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.learning_rate, self.batch_size, self.mu)?;
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config("clip epsilon must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("gamma must be in [0, 1]"));
        }
        if self.update_passes == 0 {
            return Err(Error::config("update_passes must be >= 1"));
        }
        Ok(())
    }
}

/// One episode over a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRollout {
    /// Actions at steps `1..=stop_time`, stored 0-based.
    pub actions: Vec<Action>,
    /// Snapshot probability of each recorded action; 1 for a forced stop.
    pub old_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub stop_time: usize,
    /// Whether the episode ran into `T_end` without choosing to stop.
    pub forced: bool,
}

impl EpisodeRollout {
    pub fn advantages(&self, gamma: f64) -> Vec<f64> {
        discounted_future_returns(&self.rewards, gamma)
    }

    /// Whether the policy chose the action at 0-based step `t`.
    pub fn is_decision(&self, t: usize) -> bool {
        t < self.stop_time && !(self.forced && t + 1 == self.stop_time)
    }

    /// Number of steps whose action was sampled.
    pub fn decisions(&self) -> usize {
        self.stop_time - self.forced as usize
    }
}

/// Builds an episode from a stopping step and the snapshot trace.
pub fn episode_from_stop(
    trace: &PredictionTrace,
    y: &[f64],
    stop_time: usize,
    mu: f64,
) -> Result<EpisodeRollout> {
    let t_end = trace.t_end();
    if stop_time == 0 || stop_time > t_end {
        return Err(Error::invalid(format!(
            "stop time {stop_time} outside 1..={t_end}"
        )));
    }
    let forced = stop_time == t_end;
    let mut ep = EpisodeRollout {
        actions: Vec::with_capacity(stop_time),
        old_probs: Vec::with_capacity(stop_time),
        rewards: Vec::with_capacity(stop_time),
        stop_time,
        forced,
    };
    for t in 1..=stop_time {
        let action = if t < stop_time {
            Action::Wait
        } else {
            Action::Stop
        };
        let prob = if forced && t == t_end {
            1.0
        } else {
            trace.pi[t - 1][action.index()]
        };
        ep.actions.push(action);
        ep.old_probs.push(prob);
        ep.rewards
            .push(step_reward(action, y, &trace.yhat[t - 1], t, t_end, mu)?);
    }
    Ok(ep)
}

/// Samples an episode from the snapshot trace.
pub fn rollout<R: Rng + ?Sized>(
    trace: &PredictionTrace,
    y: &[f64],
    mu: f64,
    rng: &mut R,
) -> Result<EpisodeRollout> {
    episode_from_stop(trace, y, sample_stop_time(&trace.pi, rng), mu)
}

/// `min(ratio * adv, clip(ratio, 1 - eps, 1 + eps) * adv)`
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoLoss {
    pub total: f64,
    pub ce: f64,
    pub surrogate: f64,
}

/// Loss value evaluated directly from current-policy traces.
pub fn ppo_loss(
    traces: &[PredictionTrace],
    labels: &[usize],
    rollouts: &[EpisodeRollout],
    epsilon: f64,
    gamma: f64,
) -> Result<PpoLoss> {
    let (mut ce_sum, mut visited, mut surr_sum, mut decisions) = (0.0, 0usize, 0.0, 0usize);
    for ((trace, &label), ep) in traces.iter().zip(labels).zip(rollouts) {
        let y = one_hot(label, trace.yhat[0].len());
        let adv = ep.advantages(gamma);
        #[allow(clippy::needless_range_loop)]
        for t in 0..ep.stop_time {
            ce_sum += cross_entropy(&y, &trace.yhat[t]);
            visited += 1;
            if ep.is_decision(t) {
                if !(ep.old_probs[t] > 0.0) {
                    return Err(Error::invalid(format!(
                        "snapshot probability of the action at step {} is zero",
                        t + 1
                    )));
                }
                let ratio = trace.pi[t][ep.actions[t].index()] / ep.old_probs[t];
                surr_sum += clipped_surrogate(ratio, adv[t], epsilon);
                decisions += 1;
            }
        }
    }
    let ce = ce_sum / visited.max(1) as f64;
    let surrogate = surr_sum / decisions.max(1) as f64;
    Ok(PpoLoss {
        total: ce - surrogate,
        ce,
        surrogate,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct PpoTerms {
    pub total: Var,
    pub ce: Var,
    pub surrogate: Var,
}

/// Records the batch loss for fixed rollouts. Advantages and snapshot
/// probabilities enter as constants.
pub fn ppo_loss_on_tape(
    tape: &mut Tape,
    trace: &BatchTrace,
    labels: &[usize],
    rollouts: &[EpisodeRollout],
    num_classes: usize,
    epsilon: f64,
    gamma: f64,
) -> Result<PpoTerms> {
    let b = trace.batch;
    if labels.len() != b || rollouts.len() != b {
        return Err(Error::invalid(
            "labels and rollouts must have one entry per batch row",
        ));
    }
    let advantages: Vec<Vec<f64>> = rollouts.iter().map(|r| r.advantages(gamma)).collect();
    let visited: usize = rollouts.iter().map(|r| r.stop_time).sum();
    let decisions: usize = rollouts.iter().map(EpisodeRollout::decisions).sum();
    let y = tape.constant(label_matrix(labels, num_classes));
    let mut ce_terms = Vec::new();
    let mut surr_terms = Vec::new();
    for t in 0..trace.t_end() {
        if rollouts.iter().all(|r| t >= r.stop_time) {
            break;
        }
        let seen = Tensor::raw(
            vec![b, 1],
            rollouts
                .iter()
                .map(|r| (t < r.stop_time) as u8 as f64)
                .collect(),
        );
        let seen = tape.constant(seen);
        let ce = tape.cross_entropy_rows(y, trace.yhat[t])?;
        ce_terms.push(tape.mul(ce, seen)?);

        if !rollouts.iter().any(|r| r.is_decision(t)) {
            continue;
        }
        let mut chosen = vec![0.0; b * 2];
        let mut inv_old = vec![0.0; b];
        let mut adv = vec![0.0; b];
        for (row, r) in rollouts.iter().enumerate() {
            if r.is_decision(t) {
                if !(r.old_probs[t] > 0.0) {
                    return Err(Error::invalid(format!(
                        "snapshot probability of the action at step {} is zero",
                        t + 1
                    )));
                }
                chosen[row * 2 + r.actions[t].index()] = 1.0;
                inv_old[row] = 1.0 / r.old_probs[t];
                adv[row] = advantages[row][t];
            }
        }
        let chosen = tape.constant(Tensor::raw(vec![b, 2], chosen));
        let inv_old = tape.constant(Tensor::raw(vec![b, 1], inv_old));
        let adv = tape.constant(Tensor::raw(vec![b, 1], adv));
        let picked = tape.mul(trace.pi[t], chosen)?;
        let prob = tape.sum_cols(picked)?;
        let ratio = tape.mul(prob, inv_old)?;
        let unclipped = tape.mul(ratio, adv)?;
        let clipped = tape.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon)?;
        let clipped = tape.mul(clipped, adv)?;
        // rows without a decision have zero advantage and contribute 0
        surr_terms.push(tape.minimum(unclipped, clipped)?);
    }
    let ce = tape.add_all(&ce_terms)?;
    let ce = tape.sum_all(ce)?;
    let ce = tape.scale(ce, 1.0 / visited.max(1) as f64)?;
    let surrogate = if surr_terms.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let s = tape.add_all(&surr_terms)?;
        let s = tape.sum_all(s)?;
        tape.scale(s, 1.0 / decisions.max(1) as f64)?
    };
    let total = tape.sub(ce, surrogate)?;
    Ok(PpoTerms {
        total,
        ce,
        surrogate,
    })
}

pub fn train_epoch(
    params: &mut ModelParams,
    dataset: &Dataset,
    config: &PpoConfig,
    adam: &mut AdamState,
    epoch: usize,
) -> Result<EpochStats> {
    config.validate()?;
    check_dataset(params, dataset)?;
    let mut rng = stream_rng(config.seed, &[epoch as u64, 0x9905]);
    let c = params.config.num_classes;
    let mut acc = StatsAccumulator::default();
    for idx in minibatches(dataset.len(), config.batch_size, config.seed, epoch) {
        let batch = batch_refs(dataset, &idx);
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, params);
        let trace = model.forward(&mut tape, &batch)?;
        let rollouts = trace
            .extract(&tape)
            .iter()
            .zip(&batch)
            .map(|(tr, s)| rollout(tr, &s.one_hot(c), config.mu, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        for pass in 0..config.update_passes {
            // the first pass reuses the snapshot forward pass
            let (mut pass_tape, pass_trace) = if pass == 0 {
                (std::mem::take(&mut tape), trace.clone())
            } else {
                let mut t = Tape::new();
                let m = BoundModel::bind(&mut t, params);
                let tr = m.forward(&mut t, &batch)?;
                (t, tr)
            };
            let terms = ppo_loss_on_tape(
                &mut pass_tape,
                &pass_trace,
                &labels,
                &rollouts,
                c,
                config.epsilon,
                config.gamma,
            )?;
            if pass == 0 {
                acc.add(
                    batch.len(),
                    pass_tape.value(terms.total).item(),
                    pass_tape.value(terms.ce).item(),
                    -pass_tape.value(terms.surrogate).item(),
                );
            }
            params.tensors.zero_grads();
            pass_tape.backward_into(terms.total, &mut params.tensors)?;
            adam.step(&mut params.tensors)?;
        }
    }
    Ok(acc.finish(epoch))
}

/// Stochastic inference: sample actions until a stop (forced at `T_end`)
/// and classify by argmax there.
pub fn infer_trace<R: Rng + ?Sized>(trace: &PredictionTrace, rng: &mut R) -> (usize, usize) {
    let stop = sample_stop_time(&trace.pi, rng);
    (stop, argmax(&trace.yhat[stop - 1]))
}

pub fn infer<R: Rng + ?Sized>(
    params: &ModelParams,
    sample: &Sample,
    rng: &mut R,
) -> Result<(usize, usize)> {
    Ok(infer_trace(&params.forward_trace(sample)?, rng))
}

/// Probability of the stop action at each step; convenience for reporting.
pub fn stop_probabilities(trace: &PredictionTrace) -> Vec<f64> {
    trace.pi.iter().map(|p| p[STOP]).collect()
}
