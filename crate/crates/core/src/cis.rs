//! Classifier-induced stopping.
//!
//! The classifier is trained to be accurate at every step. Its own reward
//! curve `r_t = -CE(y, yhat_t) - mu * t` then defines the ideal stopping
//! step `T~ = argmax_t r_t`, and from it a target policy: wait before `T~`,
//! stop from `T~` on. The policy head is fit to those targets by
//! cross-entropy. Targets are recomputed from the current classifier for
//! every minibatch and held fixed while differentiating.
//!
//! ```
//! use earlystop::cis::labels_for_stop_time;
//!
//! let labels = labels_for_stop_time(2, 3);
//! assert_eq!(labels.labels, vec![[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]);
//! ```

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::diffcore::{cross_entropy, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{BatchTrace, BoundModel, ModelParams, PredictionTrace, STOP, WAIT};
use crate::reward::{optimal_stop_time, reward_curve};
use crate::train::{
    batch_refs, check_common, check_dataset, label_matrix, minibatches, EpochStats,
    StatsAccumulator,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CisConfig {
    pub mu: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_lambda() -> f64 {
    1.0
}

impl CisConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.learning_rate, self.batch_size, self.mu)?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("lambda must be >= 0"));
        }
        Ok(())
    }
}

/// Target policy rows derived from the classifier's reward curve.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedLabels {
    /// 1-based ideal stopping step.
    pub stop_time: usize,
    /// `[1, 0]` (wait) before `stop_time`, `[0, 1]` (stop) from it on.
    pub labels: Vec<[f64; 2]>,
}

pub fn labels_for_stop_time(stop_time: usize, t_end: usize) -> InducedLabels {
    let labels = (1..=t_end)
        .map(|t| {
            if t < stop_time {
                [1.0, 0.0]
            } else {
                [0.0, 1.0]
            }
        })
        .collect();
    InducedLabels { stop_time, labels }
}

pub fn induced_policy_labels(y: &[f64], trace: &PredictionTrace, mu: f64) -> InducedLabels {
    let stop_time = optimal_stop_time(&reward_curve(y, trace, mu));
    labels_for_stop_time(stop_time, trace.t_end())
}

/// Loss value and its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CisLoss {
    pub total: f64,
    pub l_yhat: f64,
    pub l_pi: f64,
}

/// `L_yhat + lambda * L_pi` of one sample, evaluated directly from a trace.
pub fn cis_loss(y: &[f64], trace: &PredictionTrace, mu: f64, lambda: f64) -> CisLoss {
    let induced = induced_policy_labels(y, trace, mu);
    let t_end = trace.t_end() as f64;
    let l_yhat = trace.yhat.iter().map(|q| cross_entropy(y, q)).sum::<f64>() / t_end;
    let l_pi = induced
        .labels
        .iter()
        .zip(&trace.pi)
        .map(|(target, pi)| cross_entropy(target, pi))
        .sum::<f64>()
        / t_end;
    CisLoss {
        total: l_yhat + lambda * l_pi,
        l_yhat,
        l_pi,
    }
}

/// Recorded loss terms, each a scalar averaged over batch rows.
#[derive(Debug, Clone, Copy)]
pub struct CisTerms {
    pub total: Var,
    pub l_yhat: Var,
    pub l_pi: Var,
}

/// Records the batch CIS loss. `induced` must come from values outside the
/// tape, so no gradient reaches the labels.
pub fn cis_loss_on_tape(
    tape: &mut Tape,
    trace: &BatchTrace,
    labels: &[usize],
    induced: &[InducedLabels],
    num_classes: usize,
    lambda: f64,
) -> Result<CisTerms> {
    let b = trace.batch;
    if labels.len() != b || induced.len() != b {
        return Err(Error::invalid(
            "labels and induced targets must have one entry per batch row",
        ));
    }
    let t_end = trace.t_end();
    let y = tape.constant(label_matrix(labels, num_classes));
    let mut ce_terms = Vec::with_capacity(t_end);
    let mut pi_terms = Vec::with_capacity(t_end);
    for t in 0..t_end {
        ce_terms.push(tape.cross_entropy_rows(y, trace.yhat[t])?);
        let targets = induced.iter().flat_map(|l| l.labels[t]).collect();
        let target = tape.constant(Tensor::raw(vec![b, 2], targets));
        pi_terms.push(tape.cross_entropy_rows(target, trace.pi[t])?);
    }
    let norm = 1.0 / (b * t_end) as f64;
    let ce = tape.add_all(&ce_terms)?;
    let ce = tape.sum_all(ce)?;
    let l_yhat = tape.scale(ce, norm)?;
    let pi = tape.add_all(&pi_terms)?;
    let pi = tape.sum_all(pi)?;
    let l_pi = tape.scale(pi, norm)?;
    let weighted = tape.scale(l_pi, lambda)?;
    let total = tape.add(l_yhat, weighted)?;
    Ok(CisTerms {
        total,
        l_yhat,
        l_pi,
    })
}

/// Forward pass, label induction and loss for one minibatch, ready for
/// `backward`.
pub fn minibatch_loss(
    tape: &mut Tape,
    params: &ModelParams,
    batch: &[&Sample],
    mu: f64,
    lambda: f64,
) -> Result<CisTerms> {
    let model = BoundModel::bind(tape, params);
    let trace = model.forward(tape, batch)?;
    let c = params.config.num_classes;
    let induced: Vec<InducedLabels> = trace
        .extract(tape)
        .iter()
        .zip(batch)
        .map(|(tr, s)| induced_policy_labels(&s.one_hot(c), tr, mu))
        .collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    cis_loss_on_tape(tape, &trace, &labels, &induced, c, lambda)
}

pub fn train_epoch(
    params: &mut ModelParams,
    dataset: &Dataset,
    config: &CisConfig,
    adam: &mut AdamState,
    epoch: usize,
) -> Result<EpochStats> {
    config.validate()?;
    check_dataset(params, dataset)?;
    let mut acc = StatsAccumulator::default();
    for idx in minibatches(dataset.len(), config.batch_size, config.seed, epoch) {
        let batch = batch_refs(dataset, &idx);
        let mut tape = Tape::new();
        let terms = minibatch_loss(&mut tape, params, &batch, config.mu, config.lambda)?;
        acc.add(
            batch.len(),
            tape.value(terms.total).item(),
            tape.value(terms.l_yhat).item(),
            tape.value(terms.l_pi).item(),
        );
        params.tensors.zero_grads();
        tape.backward_into(terms.total, &mut params.tensors)?;
        adam.step(&mut params.tensors)?;
    }
    Ok(acc.finish(epoch))
}

/// Deterministic inference: stop at the first step whose most likely action
/// is "stop" (ties favour waiting), forced at `T_end`. Returns the 1-based
/// stopping step and the argmax class there.
pub fn infer_trace(trace: &PredictionTrace) -> (usize, usize) {
    let t_end = trace.t_end();
    let stop = trace
        .pi
        .iter()
        .position(|p| p[STOP] > p[WAIT])
        .map_or(t_end, |i| i + 1);
    (stop, argmax(&trace.yhat[stop - 1]))
}

pub fn infer(params: &ModelParams, sample: &Sample) -> Result<(usize, usize)> {
    Ok(infer_trace(&params.forward_trace(sample)?))
}

/// Index of the first maximal entry.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
