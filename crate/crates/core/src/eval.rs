//! Validation rollouts, Pareto frontiers of (mean stopping step, accuracy)
//! and the area under the frontier's step function.
//!
//! ```
//! use earlystop::eval::{pareto_auc, pareto_frontier, ParetoPoint};
//! use earlystop::train::Method;
//!
//! let pts = [
//!     ParetoPoint::new(Method::Cis, 0.01, 1, 2.0, 0.5),
//!     ParetoPoint::new(Method::Cis, 0.01, 2, 6.0, 0.9),
//!     ParetoPoint::new(Method::Cis, 0.01, 3, 7.0, 0.8),
//! ];
//! let frontier = pareto_frontier(&pts);
//! assert_eq!(frontier.points.len(), 2);
//! assert!((pareto_auc(&frontier, 10.0) - 0.56).abs() < 1e-12);
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, PredictionTrace};
use crate::train::{check_dataset, stream_rng, EpochStats, Method, Trainer, TrainerConfig};
use crate::{cis, larm, ppo};

/// The time penalties swept by default.
pub const DEFAULT_MU_SWEEP: [f64; 9] = [0.001, 0.003, 0.005, 0.007, 0.01, 0.03, 0.05, 0.07, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub method: Method,
    pub mu: f64,
    pub epoch: usize,
    pub mean_t: f64,
    pub accuracy: f64,
}

impl ParetoPoint {
    pub fn new(method: Method, mu: f64, epoch: usize, mean_t: f64, accuracy: f64) -> Self {
        ParetoPoint {
            method,
            mu,
            epoch,
            mean_t,
            accuracy,
        }
    }

    /// Earlier-or-equal and at-least-as-accurate, strictly better in one.
    pub fn dominates(&self, other: &ParetoPoint) -> bool {
        self.mean_t <= other.mean_t
            && self.accuracy >= other.accuracy
            && (self.mean_t < other.mean_t || self.accuracy > other.accuracy)
    }
}

/// Non-dominated points ordered by increasing mean stopping step; accuracy
/// strictly increases along the list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    pub points: Vec<ParetoPoint>,
}

/// Removes dominated points and duplicates. Among exact duplicates the
/// first in input order is kept.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Frontier {
    let mut sorted: Vec<&ParetoPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.mean_t
            .total_cmp(&b.mean_t)
            .then(b.accuracy.total_cmp(&a.accuracy))
    });
    let mut kept: Vec<ParetoPoint> = Vec::new();
    for p in sorted {
        if kept.last().is_none_or(|best| p.accuracy > best.accuracy) {
            kept.push(*p);
        }
    }
    Frontier { points: kept }
}

/// Normalized area under the frontier's step function on `[0, t_end]`.
pub fn pareto_auc(frontier: &Frontier, t_end: f64) -> f64 {
    pareto_auc_bounds(frontier, 0.0, t_end)
}

/// Normalized area on `[lo, hi]`. The step function is 0 before the first
/// frontier point and holds each point's accuracy until the next one.
pub fn pareto_auc_bounds(frontier: &Frontier, lo: f64, hi: f64) -> f64 {
    if !(hi > lo) {
        return 0.0;
    }
    let mut area = 0.0;
    for (i, p) in frontier.points.iter().enumerate() {
        let start = p.mean_t.max(lo);
        let end = frontier.points.get(i + 1).map_or(hi, |q| q.mean_t).min(hi);
        if end > start {
            area += p.accuracy * (end - start);
        }
    }
    area / (hi - lo)
}

/// Mean stopping step and accuracy over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean_t: f64,
    pub accuracy: f64,
}

/// Applies the method's inference rule to one trace.
pub fn infer_trace<R: Rng + ?Sized>(
    method: Method,
    trace: &PredictionTrace,
    rng: &mut R,
) -> (usize, usize) {
    match method {
        Method::Cis => cis::infer_trace(trace),
        Method::Larm => larm::infer_trace(trace, rng),
        Method::Ppo => ppo::infer_trace(trace, rng),
    }
}

/// Evaluation from precomputed traces, averaged over `repeats` passes
/// (only meaningful for stochastic methods).
pub fn evaluate_traces<R: Rng + ?Sized>(
    method: Method,
    traces: &[PredictionTrace],
    labels: &[usize],
    repeats: usize,
    rng: &mut R,
) -> Evaluation {
    let repeats = if method == Method::Cis {
        1
    } else {
        repeats.max(1)
    };
    let (mut t_sum, mut hits) = (0.0, 0usize);
    for _ in 0..repeats {
        for (trace, &label) in traces.iter().zip(labels) {
            let (t, class) = infer_trace(method, trace, rng);
            t_sum += t as f64;
            hits += (class == label) as usize;
        }
    }
    let n = (traces.len() * repeats) as f64;
    Evaluation {
        mean_t: t_sum / n,
        accuracy: hits as f64 / n,
    }
}

pub fn evaluate<R: Rng + ?Sized>(
    params: &ModelParams,
    dataset: &Dataset,
    method: Method,
    rng: &mut R,
) -> Result<Evaluation> {
    evaluate_repeated(params, dataset, method, 1, rng)
}

pub fn evaluate_repeated<R: Rng + ?Sized>(
    params: &ModelParams,
    dataset: &Dataset,
    method: Method,
    repeats: usize,
    rng: &mut R,
) -> Result<Evaluation> {
    check_dataset(params, dataset)?;
    let traces = params.trace_batch(&dataset.samples)?;
    let labels: Vec<usize> = dataset.samples.iter().map(|s| s.label).collect();
    Ok(evaluate_traces(method, &traces, &labels, repeats, rng))
}

/// Evaluation rng stream for one `(mu, epoch)` point.
pub fn eval_rng(seed: u64, mu: f64, epoch: usize) -> rand_chacha::ChaCha8Rng {
    stream_rng(seed, &[0xe7a1, mu.to_bits(), epoch as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub model: ModelConfig,
    /// Template trainer; its `mu` is replaced by each swept value.
    pub trainer: TrainerConfig,
    pub mu_list: Vec<f64>,
    #[serde(default = "one")]
    pub eval_repeats: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

/// Everything recorded while training one `mu` of a sweep.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub mu: f64,
    pub stats: Vec<EpochStats>,
    pub points: Vec<ParetoPoint>,
    pub final_params: ModelParams,
}

/// Trains one fresh model per `mu`, evaluating on `val` after every epoch.
pub fn sweep(config: &SweepConfig, train: &Dataset, val: &Dataset) -> Result<Vec<ParetoPoint>> {
    Ok(sweep_runs(config, train, val, |_| {})?
        .into_iter()
        .flat_map(|r| r.points)
        .collect())
}

/// As [`sweep`], keeping per-run statistics and calling `progress` after
/// each epoch.
pub fn sweep_runs(
    config: &SweepConfig,
    train: &Dataset,
    val: &Dataset,
    mut progress: impl FnMut(&ParetoPoint),
) -> Result<Vec<SweepRun>> {
    if config.mu_list.is_empty() {
        return Err(Error::config("mu list is empty"));
    }
    let method = config.trainer.method();
    let labels: Vec<usize> = val.samples.iter().map(|s| s.label).collect();
    let mut runs = Vec::with_capacity(config.mu_list.len());
    for &mu in &config.mu_list {
        let mut trainer = Trainer::new(&config.model, config.trainer.with_mu(mu))?;
        check_dataset(&trainer.params, val)?;
        let mut stats = Vec::new();
        let mut points = Vec::new();
        for _ in 0..config.trainer.epochs() {
            stats.push(trainer.run_epoch(train)?);
            let traces = trainer.params.trace_batch(&val.samples)?;
            let mut rng = eval_rng(config.seed, mu, trainer.epoch);
            let e = evaluate_traces(method, &traces, &labels, config.eval_repeats, &mut rng);
            let point = ParetoPoint::new(method, mu, trainer.epoch, e.mean_t, e.accuracy);
            progress(&point);
            points.push(point);
        }
        runs.push(SweepRun {
            mu,
            stats,
            points,
            final_params: trainer.params,
        });
    }
    Ok(runs)
}
