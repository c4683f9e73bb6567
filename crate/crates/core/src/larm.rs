//! Length-adaptive recurrent model baseline.
//!
//! The policy defines a distribution over stopping steps: the probability
//! of stopping exactly at `T` is the product of the wait probabilities
//! before `T` times the stop probability at `T`, with stopping forced at
//! `T_end`. Training minimizes the cross-entropy of the stop-weighted
//! mixture of classifier outputs plus `mu` times the expected stopping
//! step. During training each wait factor is replaced by 1 with
//! probability `rho`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cis::argmax;
use crate::data::{Dataset, Sample};
use crate::diffcore::{cross_entropy, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{BatchTrace, BoundModel, ModelParams, PredictionTrace, STOP, WAIT};
use crate::train::{
    batch_refs, check_common, check_dataset, label_matrix, minibatches, stream_rng, EpochStats,
    StatsAccumulator,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LarmConfig {
    pub mu: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_rho() -> f64 {
    0.9
}

impl LarmConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.learning_rate, self.batch_size, self.mu)?;
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config(format!(
                "rho must be in [0, 1], got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

/// Probability of stopping at each step `T = 1..=T_end` (stored 0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct StopDistribution {
    pub weights: Vec<f64>,
}

impl StopDistribution {
    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `sum_T T * P_T`
    pub fn expected_time(&self) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(i, w)| (i + 1) as f64 * w)
            .sum()
    }
}

/// Stopping-step weights of a policy trace. Where `mask[t]` is set, the
/// wait factor at `t` counts as 1.
pub fn stop_distribution(pi: &[[f64; 2]], mask: Option<&[bool]>) -> StopDistribution {
    let t_end = pi.len();
    let mut weights = Vec::with_capacity(t_end);
    let mut survive = 1.0;
    for (t, p) in pi.iter().enumerate() {
        if t + 1 == t_end {
            weights.push(survive);
        } else {
            weights.push(survive * p[STOP]);
            let masked = mask.is_some_and(|m| m[t]);
            survive *= if masked { 1.0 } else { p[WAIT] };
        }
    }
    StopDistribution { weights }
}

/// Independent Bernoulli(`rho`) draw per step.
pub fn sample_rho_mask<R: Rng + ?Sized>(t_end: usize, rho: f64, rng: &mut R) -> Vec<bool> {
    (0..t_end).map(|_| rng.random::<f64>() < rho).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LarmLoss {
    pub total: f64,
    /// Cross-entropy of the stop-weighted classifier mixture.
    pub mixture_ce: f64,
    pub expected_time: f64,
}

/// `CE(y, sum_T P_T yhat_T) + mu * sum_T T P_T` of one sample.
pub fn larm_loss(y: &[f64], trace: &PredictionTrace, mu: f64, mask: Option<&[bool]>) -> LarmLoss {
    let dist = stop_distribution(&trace.pi, mask);
    let mut mixture = vec![0.0; y.len()];
    for (w, q) in dist.weights.iter().zip(&trace.yhat) {
        mixture.iter_mut().zip(q).for_each(|(m, qi)| *m += w * qi);
    }
    let mixture_ce = cross_entropy(y, &mixture);
    let expected_time = dist.expected_time();
    LarmLoss {
        total: mixture_ce + mu * expected_time,
        mixture_ce,
        expected_time,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LarmTerms {
    pub total: Var,
    pub mixture_ce: Var,
    pub expected_time: Var,
}

/// Records the batch LARM loss; `masks[b][t]` forces the wait factor of
/// row `b` at step `t` to 1.
pub fn larm_loss_on_tape(
    tape: &mut Tape,
    trace: &BatchTrace,
    labels: &[usize],
    masks: &[Vec<bool>],
    num_classes: usize,
    mu: f64,
) -> Result<LarmTerms> {
    let b = trace.batch;
    let t_end = trace.t_end();
    if labels.len() != b || masks.len() != b || masks.iter().any(|m| m.len() != t_end) {
        return Err(Error::invalid(
            "labels and masks must cover every batch row and step",
        ));
    }
    let mut survive: Option<Var> = None;
    let mut mixture: Option<Var> = None;
    let mut expected: Option<Var> = None;
    for t in 0..t_end {
        let weight = if t + 1 == t_end {
            match survive {
                Some(s) => s,
                None => tape.constant(Tensor::filled(b, 1, 1.0)),
            }
        } else {
            let stop = tape.slice_cols(trace.pi[t], STOP, STOP + 1)?;
            let weight = match survive {
                Some(s) => tape.mul(s, stop)?,
                None => stop,
            };
            let wait = tape.slice_cols(trace.pi[t], WAIT, WAIT + 1)?;
            let factor = if masks.iter().any(|m| m[t]) {
                let keep = Tensor::raw(
                    vec![b, 1],
                    masks.iter().map(|m| if m[t] { 0.0 } else { 1.0 }).collect(),
                );
                let keep = tape.constant(keep);
                let forced = Tensor::raw(
                    vec![b, 1],
                    masks.iter().map(|m| if m[t] { 1.0 } else { 0.0 }).collect(),
                );
                let forced = tape.constant(forced);
                let kept = tape.mul(wait, keep)?;
                tape.add(kept, forced)?
            } else {
                wait
            };
            survive = Some(match survive {
                Some(s) => tape.mul(s, factor)?,
                None => factor,
            });
            weight
        };
        let part = tape.mul_col(trace.yhat[t], weight)?;
        mixture = Some(match mixture {
            Some(m) => tape.add(m, part)?,
            None => part,
        });
        let timed = tape.scale(weight, (t + 1) as f64)?;
        expected = Some(match expected {
            Some(e) => tape.add(e, timed)?,
            None => timed,
        });
    }
    let mixture = mixture.expect("t_end >= 1");
    let expected = expected.expect("t_end >= 1");
    let y = tape.constant(label_matrix(labels, num_classes));
    let ce = tape.cross_entropy_rows(y, mixture)?;
    let ce = tape.sum_all(ce)?;
    let mixture_ce = tape.scale(ce, 1.0 / b as f64)?;
    let et = tape.sum_all(expected)?;
    let expected_time = tape.scale(et, 1.0 / b as f64)?;
    let penalty = tape.scale(expected_time, mu)?;
    let total = tape.add(mixture_ce, penalty)?;
    Ok(LarmTerms {
        total,
        mixture_ce,
        expected_time,
    })
}

pub fn train_epoch(
    params: &mut ModelParams,
    dataset: &Dataset,
    config: &LarmConfig,
    adam: &mut AdamState,
    epoch: usize,
) -> Result<EpochStats> {
    config.validate()?;
    check_dataset(params, dataset)?;
    let mut rng = stream_rng(config.seed, &[epoch as u64, 0x1a63]);
    let t_end = params.config.t_end;
    let c = params.config.num_classes;
    let mut acc = StatsAccumulator::default();
    for idx in minibatches(dataset.len(), config.batch_size, config.seed, epoch) {
        let batch = batch_refs(dataset, &idx);
        let masks: Vec<Vec<bool>> = batch
            .iter()
            .map(|_| sample_rho_mask(t_end, config.rho, &mut rng))
            .collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let mut tape = Tape::new();
        let model = BoundModel::bind(&mut tape, params);
        let trace = model.forward(&mut tape, &batch)?;
        let terms = larm_loss_on_tape(&mut tape, &trace, &labels, &masks, c, config.mu)?;
        acc.add(
            batch.len(),
            tape.value(terms.total).item(),
            tape.value(terms.mixture_ce).item(),
            config.mu * tape.value(terms.expected_time).item(),
        );
        params.tensors.zero_grads();
        tape.backward_into(terms.total, &mut params.tensors)?;
        adam.step(&mut params.tensors)?;
    }
    Ok(acc.finish(epoch))
}

/// Samples a 1-based stopping step from the policy rows, forcing a stop at
/// the last step.
pub fn sample_stop_time<R: Rng + ?Sized>(pi: &[[f64; 2]], rng: &mut R) -> usize {
    let t_end = pi.len();
    for (t, p) in pi.iter().enumerate().take(t_end - 1) {
        if rng.random::<f64>() < p[STOP] {
            return t + 1;
        }
    }
    t_end
}

/// Stochastic policy rollout with deterministic (argmax) classification.
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Elements;
    use crate::diffcore::grad_check;
    use crate::model::{init_model, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn distribution_examples() {
        let half = stop_distribution(&[[0.5, 0.5]; 3], None);
        assert_eq!(half.weights, vec![0.5, 0.25, 0.25]);
        assert_eq!(half.total(), 1.0);
        assert_eq!(
            stop_distribution(&[[0.0, 1.0], [0.5, 0.5], [0.5, 0.5]], None).weights,
            vec![1.0, 0.0, 0.0]
        );
        assert_eq!(
            stop_distribution(&[[1.0, 0.0]; 4], None).weights,
            vec![0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn masking_can_exceed_one() {
        let d = stop_distribution(&[[0.5, 0.5]; 3], Some(&[true, true, false]));
        assert_eq!(d.weights, vec![0.5, 0.5, 1.0]);
        assert_eq!(d.total(), 2.0);
    }

    #[test]
    fn worked_example() {
        let trace = PredictionTrace {
            yhat: vec![vec![0.8, 0.2], vec![0.6, 0.4]],
            pi: vec![[0.5, 0.5], [0.5, 0.5]],
        };
        let loss = larm_loss(&[1.0, 0.0], &trace, 0.1, None);
        assert!((loss.mixture_ce - 0.356675).abs() < 1e-6);
        assert_eq!(loss.expected_time, 1.5);
        assert!((loss.total - 0.506675).abs() < 1e-6);
    }

    #[test]
    fn concentrated_stop_reduces_to_reward() {
        let trace = PredictionTrace {
            yhat: vec![vec![0.7, 0.3], vec![0.4, 0.6], vec![0.9, 0.1]],
            pi: vec![[0.0, 1.0], [0.2, 0.8], [0.5, 0.5]],
        };
        let loss = larm_loss(&[0.0, 1.0], &trace, 0.03, None);
        assert!((loss.total - (-(0.3f64).ln() + 0.03)).abs() < 1e-15);
    }

    #[test]
    fn perfect_classifier_without_penalty_is_zero() {
        let trace = PredictionTrace {
            yhat: vec![vec![1.0, 0.0]; 3],
            pi: vec![[0.3, 0.7], [0.6, 0.4], [0.5, 0.5]],
        };
        assert_eq!(larm_loss(&[1.0, 0.0], &trace, 0.0, None).total, 0.0);
    }

    #[test]
    fn rho_mask_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_rho_mask(50, 0.0, &mut rng).iter().all(|m| !m));
        assert!(sample_rho_mask(50, 1.0, &mut rng).iter().all(|&m| m));
        let hits = (0..1000)
            .flat_map(|_| sample_rho_mask(10, 0.9, &mut rng))
            .filter(|&m| m)
            .count();
        let rate = hits as f64 / 10_000.0;
        assert!((rate - 0.9).abs() < 0.01, "{rate}");
    }

    #[test]
    fn sampled_stops_follow_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pi = [[0.5, 0.5]; 3];
        let n = 20_000;
        let mean = (0..n)
            .map(|_| sample_stop_time(&pi, &mut rng) as f64)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.75).abs() < 0.05, "{mean}");
        assert!((0..100).all(|_| sample_stop_time(&[[0.0, 1.0], [0.5, 0.5]], &mut rng) == 1));
        assert!((0..100).all(|_| sample_stop_time(&[[1.0, 0.0]; 4], &mut rng) == 4));
    }

    fn toy() -> (ModelParams, Vec<Sample>) {
        let cfg = ModelConfig {
            seed: 11,
            ..ModelConfig::dense(2, 4, 4, 3, 5)
        };
        let samples = (0..2)
            .map(|k| Sample {
                label: 2 - k,
                elements: Elements::Dense(
                    (0..5)
                        .map(|t| vec![(t as f64 - k as f64).cos(), 0.2 * t as f64])
                        .collect(),
                ),
            })
            .collect();
        (init_model(&cfg).unwrap(), samples)
    }

    #[test]
    fn tape_loss_matches_value_path_with_masks() {
        let (params, samples) = toy();
        let refs: Vec<&Sample> = samples.iter().collect();
        let masks = vec![vec![true, false, true, false, true], vec![false; 5]];
        let mut tape = Tape::new();
        let m = BoundModel::bind(&mut tape, &params);
        let tr = m.forward(&mut tape, &refs).unwrap();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let terms = larm_loss_on_tape(&mut tape, &tr, &labels, &masks, 3, 0.07).unwrap();
        let expected = samples
            .iter()
            .zip(&masks)
            .map(|(s, mask)| {
                larm_loss(
                    &s.one_hot(3),
                    &params.forward_trace(s).unwrap(),
                    0.07,
                    Some(mask),
                )
                .total
            })
            .sum::<f64>()
            / 2.0;
        assert!((tape.value(terms.total).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_with_fixed_mask() {
        let (mut params, samples) = toy();
        let refs: Vec<&Sample> = samples.iter().collect();
        let masks = vec![
            vec![false, true, false, false, true],
            vec![true, false, false, true, false],
        ];
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let cfg = params.config.clone();
        let layout = params.layout();
        let report = grad_check(
            |tape, vars| {
                let m = BoundModel {
                    config: cfg.clone(),
                    layout,
                    vars: vars.to_vec(),
                };
                let tr = m.forward(tape, &refs)?;
                Ok(larm_loss_on_tape(tape, &tr, &labels, &masks, 3, 0.05)?.total)
            },
            &mut params.tensors,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
