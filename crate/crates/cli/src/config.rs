//! Run configuration: a TOML file with one table per concern, patched by
//! command-line overrides before it is parsed.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use earlystop::cis::CisConfig;
use earlystop::data::{self, Dataset, DriftWalkSpec, FileFormat, MotifSpec};
use earlystop::eval::DEFAULT_MU_SWEEP;
use earlystop::larm::LarmConfig;
use earlystop::model::{InputMode, ModelConfig};
use earlystop::ppo::PpoConfig;
use earlystop::train::{Method, TrainerConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn default_method() -> Method {
    Method::Cis
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Motif,
    DriftWalk,
}

/// Where samples come from: a generator or files on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Generator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Separate validation file; without it the data is split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<FileFormat>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Generator seed; defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_t_end")]
    pub t_end: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_motif_len")]
    pub motif_len: usize,
    #[serde(default = "default_window")]
    pub window: [usize; 2],
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default = "default_drift_range")]
    pub drift_range: f64,
    #[serde(default = "default_vol")]
    pub vol: f64,
    /// Feature count of dense file data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<usize>,
    /// Vocabulary size of token file data (ids `0..vocab`, `vocab` pads).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<usize>,
}

fn default_val_fraction() -> f64 {
    0.2
}
fn default_n() -> usize {
    2500
}
fn default_t_end() -> usize {
    50
}
fn default_classes() -> usize {
    2
}
fn default_motif_len() -> usize {
    3
}
fn default_window() -> [usize; 2] {
    [10, 30]
}
fn default_sigma() -> f64 {
    0.1
}
fn default_amplitude() -> f64 {
    1.0
}
fn default_drift_range() -> f64 {
    0.1
}
fn default_vol() -> f64 {
    1.0
}

impl Default for DataSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_hidden")]
    pub head_hidden_dim: usize,
    /// Embedding width for token data.
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default)]
    pub policy_bias_init: [f64; 2],
}

fn default_hidden() -> usize {
    16
}
fn default_embed() -> usize {
    8
}

impl Default for ModelSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

/// Trainer settings. Method-specific keys are optional so that a key given
/// for the wrong method can be reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update_passes: Option<usize>,
}

fn default_mu() -> f64 {
    0.01
}
fn default_lr() -> f64 {
    0.01
}
fn default_batch() -> usize {
    128
}
fn default_epochs() -> usize {
    20
}

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Methods to sweep; defaults to the run's `method`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub methods: Vec<Method>,
    #[serde(default = "default_mu_list")]
    pub mu: Vec<f64>,
    #[serde(default = "default_repeats")]
    pub eval_repeats: usize,
    #[serde(default)]
    pub plot: bool,
}

fn default_mu_list() -> Vec<f64> {
    DEFAULT_MU_SWEEP.to_vec()
}
fn default_repeats() -> usize {
    1
}

impl Default for SweepSection {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

/// Parses `value` as a TOML value, falling back to a plain string.
fn parse_value(value: &str) -> toml::Value {
    let wrapped = format!("v = {value}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Sets a dotted key such as `train.mu` inside a table.
pub fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .with_context(|| format!("empty key in {key:?}"))?;
    let mut current = table;
    for part in parts {
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .with_context(|| format!("{part:?} in {key:?} is not a table"))?;
    }
    current.insert(last.to_string(), value);
    Ok(())
}

/// Splits a `KEY=VALUE` override.
pub fn parse_assignment(assignment: &str) -> anyhow::Result<(String, toml::Value)> {
    let (key, value) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not KEY=VALUE"))?;
    Ok((key.trim().to_string(), parse_value(value.trim())))
}

/// Applies a `KEY=VALUE` override.
pub fn apply_assignment(table: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (key, value) = parse_assignment(assignment)?;
    set_key(table, &key, value)
}

impl RunConfig {
    /// Reads an optional config file, applies overrides in order and parses.
    pub fn load(
        path: Option<&Path>,
        overrides: &[(String, toml::Value)],
    ) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            set_key(&mut table, key, value.clone())?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        Ok(config)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    /// Methods a sweep covers.
    pub fn sweep_methods(&self) -> Vec<Method> {
        if self.sweep.methods.is_empty() {
            vec![self.method]
        } else {
            self.sweep.methods.clone()
        }
    }

    /// Rejects method-specific keys that no selected method uses.
    pub fn check_method_fields(&self, methods: &[Method]) -> Result<(), CliError> {
        let t = &self.train;
        let owners: [(&str, bool, &[Method]); 5] = [
            ("lambda", t.lambda.is_some(), &[Method::Cis]),
            ("rho", t.rho.is_some(), &[Method::Larm]),
            ("epsilon", t.epsilon.is_some(), &[Method::Ppo]),
            ("gamma", t.gamma.is_some(), &[Method::Ppo]),
            ("update_passes", t.update_passes.is_some(), &[Method::Ppo]),
        ];
        for (key, given, users) in owners {
            if given && !methods.iter().any(|m| users.contains(m)) {
                return Err(CliError::config(format!(
                    "train.{key} applies only to {}, not to {}",
                    users
                        .iter()
                        .map(|m| m.as_str())
                        .collect::<Vec<_>>()
                        .join("/"),
                    methods
                        .iter()
                        .map(|m| m.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn trainer(&self, method: Method) -> Result<TrainerConfig, CliError> {
        let t = &self.train;
        let config = match method {
            Method::Cis => TrainerConfig::Cis(CisConfig {
                mu: t.mu,
                lambda: t.lambda.unwrap_or(1.0),
                learning_rate: t.learning_rate,
                batch_size: t.batch_size,
                epochs: t.epochs,
                seed: self.seed,
            }),
            Method::Larm => TrainerConfig::Larm(LarmConfig {
                mu: t.mu,
                rho: t.rho.unwrap_or(0.9),
                learning_rate: t.learning_rate,
                batch_size: t.batch_size,
                epochs: t.epochs,
                seed: self.seed,
            }),
            Method::Ppo => TrainerConfig::Ppo(PpoConfig {
                mu: t.mu,
                gamma: t.gamma.unwrap_or(1.0),
                epsilon: t.epsilon.unwrap_or(0.2),
                learning_rate: t.learning_rate,
                batch_size: t.batch_size,
                epochs: t.epochs,
                update_passes: t.update_passes.unwrap_or(1),
                seed: self.seed,
            }),
        };
        config.validate().map_err(CliError::from)?;
        Ok(config)
    }

    pub fn model(&self, data: &Dataset) -> Result<ModelConfig, CliError> {
        let input = match data.mode {
            InputMode::Dense { feature_dim } => InputMode::Dense { feature_dim },
            InputMode::Tokens { vocab, .. } => InputMode::Tokens {
                vocab,
                embed_dim: self.model.embed_dim,
            },
        };
        let config = ModelConfig {
            input,
            hidden_dim: self.model.hidden_dim,
            head_hidden_dim: self.model.head_hidden_dim,
            num_classes: data.num_classes,
            t_end: data.t_end,
            policy_bias_init: self.model.policy_bias_init,
            seed: self.seed,
        };
        config.validate().map_err(CliError::from)?;
        Ok(config)
    }

    pub fn motif_spec(&self) -> MotifSpec {
        let d = &self.data;
        MotifSpec {
            n: d.n,
            t_end: d.t_end,
            num_classes: d.num_classes,
            motif_len: d.motif_len,
            window: (d.window[0], d.window[1]),
            noise_sigma: d.noise_sigma,
            amplitude: d.amplitude,
            seed: self.data_seed(),
        }
    }

    pub fn drift_walk_spec(&self) -> DriftWalkSpec {
        let d = &self.data;
        DriftWalkSpec {
            n: d.n,
            t_end: d.t_end,
            drift_range: d.drift_range,
            vol: d.vol,
            seed: self.data_seed(),
        }
    }

    /// Runs the configured generator.
    pub fn generate(&self) -> Result<Dataset, CliError> {
        let dataset = match self.data.generator {
            Some(Generator::Motif) | None => data::gen_motif(&self.motif_spec()),
            Some(Generator::DriftWalk) => data::gen_drift_walk(&self.drift_walk_spec()),
        };
        dataset.map_err(CliError::from)
    }

    fn file_mode(&self) -> Result<InputMode, CliError> {
        match (self.data.features, self.data.vocab) {
            (Some(feature_dim), None) => Ok(InputMode::Dense { feature_dim }),
            (None, Some(vocab)) => Ok(InputMode::Tokens {
                vocab,
                embed_dim: self.model.embed_dim,
            }),
            _ => Err(CliError::config(
                "file data needs exactly one of data.features or data.vocab",
            )),
        }
    }

    fn load_file(&self, path: &Path) -> Result<Dataset, CliError> {
        let format = self
            .data
            .format
            .or_else(|| FileFormat::from_path(path))
            .ok_or_else(|| {
                CliError::config(format!(
                    "cannot tell the format of {}; set data.format",
                    path.display()
                ))
            })?;
        if !path.exists() {
            return Err(CliError::config(format!(
                "dataset {} does not exist",
                path.display()
            )));
        }
        let mode = self.file_mode()?;
        data::load_dataset(path, format, mode, self.data.num_classes, self.data.t_end)
            .map_err(CliError::from)
    }

    /// Training and validation sets as configured.
    pub fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        if self.data.path.is_some() && self.data.generator.is_some() {
            return Err(CliError::config(
                "set either data.path or data.generator, not both",
            ));
        }
        let all = match &self.data.path {
            Some(path) => self.load_file(path)?,
            None => self.generate()?,
        };
        match &self.data.val_path {
            Some(val) => Ok((all, self.load_file(val)?)),
            None => {
                data::split(&all, self.data.val_fraction, self.data_seed()).map_err(CliError::from)
            }
        }
    }
}
