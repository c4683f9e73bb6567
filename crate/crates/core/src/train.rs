//! Pieces shared by the three trainers: configuration dispatch, seeded
//! minibatch order and per-epoch statistics.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cis::CisConfig;
use crate::data::{one_hot, Dataset, Sample};
use crate::diffcore::{AdamConfig, AdamState, Tensor};
use crate::error::{Error, Result};
use crate::larm::LarmConfig;
use crate::model::{init_model, ModelConfig, ModelParams};
use crate::ppo::PpoConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cis,
    Larm,
    Ppo,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Cis, Method::Larm, Method::Ppo];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cis => "cis",
            Method::Larm => "larm",
            Method::Ppo => "ppo",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cis" => Ok(Method::Cis),
            "larm" => Ok(Method::Larm),
            "ppo" => Ok(Method::Ppo),
            other => Err(Error::config(format!(
                "unknown method {other:?} (expected cis, larm or ppo)"
            ))),
        }
    }
}

/// Losses averaged over one epoch's minibatches, weighted by batch size.
///
/// `loss_yhat` and `loss_pi` are the method's classification and policy
/// terms: the two CIS losses, LARM's mixture cross-entropy and
/// `mu * E[T]`, or PPO's cross-entropy term and negated surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub loss_yhat: f64,
    pub loss_pi: f64,
}

#[derive(Debug, Default)]
pub(crate) struct StatsAccumulator {
    weight: f64,
    loss: f64,
    yhat: f64,
    pi: f64,
}

impl StatsAccumulator {
    pub fn add(&mut self, rows: usize, loss: f64, yhat: f64, pi: f64) {
        let w = rows as f64;
        self.weight += w;
        self.loss += w * loss;
        self.yhat += w * yhat;
        self.pi += w * pi;
    }

    pub fn finish(self, epoch: usize) -> EpochStats {
        let w = self.weight.max(1.0);
        EpochStats {
            epoch,
            loss: self.loss / w,
            loss_yhat: self.yhat / w,
            loss_pi: self.pi / w,
        }
    }
}

/// SplitMix64 finalizer over a seed and a list of stream identifiers.
pub fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn stream_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, parts))
}

/// Shuffled minibatch index lists for one epoch.
pub fn minibatches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, &[epoch as u64]));
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

pub(crate) fn check_dataset(params: &ModelParams, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    let cfg = &params.config;
    if dataset.t_end != cfg.t_end
        || dataset.num_classes != cfg.num_classes
        || dataset.mode != cfg.input
    {
        return Err(Error::config(format!(
            "dataset (T_end {}, C {}, {:?}) does not match model (T_end {}, C {}, {:?})",
            dataset.t_end, dataset.num_classes, dataset.mode, cfg.t_end, cfg.num_classes, cfg.input
        )));
    }
    Ok(())
}

pub(crate) fn batch_refs<'a>(dataset: &'a Dataset, idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| &dataset.samples[i]).collect()
}

/// One-hot label rows as a `[B, C]` tensor.
pub(crate) fn label_matrix(labels: &[usize], num_classes: usize) -> Tensor {
    let values = labels
        .iter()
        .flat_map(|&l| one_hot(l, num_classes))
        .collect();
    Tensor::raw(vec![labels.len(), num_classes], values)
}

pub(crate) fn check_common(learning_rate: f64, batch_size: usize, mu: f64) -> Result<()> {
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(Error::config("learning rate must be positive"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(Error::config("time penalty mu must be >= 0"));
    }
    Ok(())
}

/// Method-specific trainer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum TrainerConfig {
    Cis(CisConfig),
    Larm(LarmConfig),
    Ppo(PpoConfig),
}

impl TrainerConfig {
    pub fn method(&self) -> Method {
        match self {
            TrainerConfig::Cis(_) => Method::Cis,
            TrainerConfig::Larm(_) => Method::Larm,
            TrainerConfig::Ppo(_) => Method::Ppo,
        }
    }

    pub fn mu(&self) -> f64 {
        match self {
            TrainerConfig::Cis(c) => c.mu,
            TrainerConfig::Larm(c) => c.mu,
            TrainerConfig::Ppo(c) => c.mu,
        }
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            TrainerConfig::Cis(c) => c.mu = mu,
            TrainerConfig::Larm(c) => c.mu = mu,
            TrainerConfig::Ppo(c) => c.mu = mu,
        }
        out
    }

    pub fn epochs(&self) -> usize {
        match self {
            TrainerConfig::Cis(c) => c.epochs,
            TrainerConfig::Larm(c) => c.epochs,
            TrainerConfig::Ppo(c) => c.epochs,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            TrainerConfig::Cis(c) => c.learning_rate,
            TrainerConfig::Larm(c) => c.learning_rate,
            TrainerConfig::Ppo(c) => c.learning_rate,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            TrainerConfig::Cis(c) => c.seed,
            TrainerConfig::Larm(c) => c.seed,
            TrainerConfig::Ppo(c) => c.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TrainerConfig::Cis(c) => c.validate(),
            TrainerConfig::Larm(c) => c.validate(),
            TrainerConfig::Ppo(c) => c.validate(),
        }
    }
}

/// A model, its optimizer state and the trainer that updates them.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ModelParams,
    pub adam: AdamState,
    pub config: TrainerConfig,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl Trainer {
    /// Fresh model initialized from `model.seed`.
    pub fn new(model: &ModelConfig, config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let params = init_model(model)?;
        let adam = AdamState::new(AdamConfig::with_lr(config.learning_rate()), &params.tensors);
        Ok(Trainer {
            params,
            adam,
            config,
            epoch: 0,
        })
    }

    /// Continues from existing parameters and optimizer state.
    pub fn resume(
        params: ModelParams,
        adam: AdamState,
        config: TrainerConfig,
        epoch: usize,
    ) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        Ok(Trainer {
            params,
            adam,
            config,
            epoch,
        })
    }

    pub fn method(&self) -> Method {
        self.config.method()
    }

    /// Runs the next epoch and returns its statistics.
    pub fn run_epoch(&mut self, train: &Dataset) -> Result<EpochStats> {
        let epoch = self.epoch + 1;
        let stats = match &self.config {
            TrainerConfig::Cis(c) => {
                crate::cis::train_epoch(&mut self.params, train, c, &mut self.adam, epoch)?
            }
            TrainerConfig::Larm(c) => {
                crate::larm::train_epoch(&mut self.params, train, c, &mut self.adam, epoch)?
            }
            TrainerConfig::Ppo(c) => {
                crate::ppo::train_epoch(&mut self.params, train, c, &mut self.adam, epoch)?
            }
        };
        self.epoch = epoch;
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minibatches_cover_every_index_once() {
        let batches = minibatches(300, 128, 5, 1);
        assert_eq!(
            batches.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![128, 128, 44]
        );
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..300).collect::<Vec<_>>());
        assert_eq!(batches, minibatches(300, 128, 5, 1));
        assert_ne!(batches, minibatches(300, 128, 5, 2));
    }

    #[test]
    fn stream_seeds_differ() {
        assert_ne!(stream_seed(1, &[0]), stream_seed(1, &[1]));
        assert_ne!(stream_seed(1, &[2, 3]), stream_seed(1, &[3, 2]));
        assert_eq!(stream_seed(9, &[4]), stream_seed(9, &[4]));
    }

    #[test]
    fn method_parsing() {
        assert_eq!("CIS".parse::<Method>().unwrap(), Method::Cis);
        assert!("dqn".parse::<Method>().is_err());
        assert_eq!(Method::Larm.to_string(), "larm");
    }
}
