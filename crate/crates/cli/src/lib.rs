//! Command-line driver: dataset generation, training, evaluation, μ sweeps
//! and the gradient self-check.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 when a
//! validation fails (a gradient check, or malformed input data).

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod report;

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn config(msg: impl fmt::Display) -> Self {
        CliError {
            code: 1,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn validation(msg: impl fmt::Display) -> Self {
        CliError {
            code: 2,
            error: anyhow::anyhow!("{msg}"),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        CliError { code: 1, error }
    }
}

impl From<earlystop::Error> for CliError {
    fn from(e: earlystop::Error) -> Self {
        use earlystop::Error as E;
        let code = match e {
            E::Invalid(_) | E::Parse { .. } | E::ShapeMismatch { .. } | E::NonFinite { .. } => 2,
            _ => 1,
        };
        CliError {
            code,
            error: e.into(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "earlystop",
    version,
    about = "Train and compare early-stopping sequence classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as JSONL plus a manifest.
    GenData(GenDataArgs),
    /// Train one model and write per-epoch statistics and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation data.
    Eval(EvalArgs),
    /// Train one model per μ for each method and compare Pareto frontiers.
    Sweep(SweepArgs),
    /// Compare analytic and finite-difference gradients of all three losses.
    Gradcheck(GradcheckArgs),
}

/// Options shared by every command that reads a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset file (JSONL or tab-delimited) instead of a generator.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation file; without it the dataset is split.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub update_passes: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Arbitrary override such as `data.n=500` or `model.policy_bias_init=[10.0, 0.0]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output JSONL file; the manifest is written next to it.
    #[arg(long, short)]
    pub out: PathBuf,
    /// `motif` or `drift_walk`.
    #[arg(long)]
    pub generator: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub t_end: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub motif_len: Option<usize>,
    /// Earliest and latest motif start, e.g. `10,30`.
    #[arg(long, value_delimiter = ',')]
    pub window: Option<Vec<usize>>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from a checkpoint; epoch numbering carries on.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Rollouts per sample for stochastic methods.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated methods, e.g. `cis,larm,ppo`.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Comma-separated μ values; defaults to the standard nine-value set.
    #[arg(long, value_delimiter = ',')]
    pub mu_list: Option<Vec<f64>>,
    /// Also write `frontier.svg`.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Add this constant to every analytic gradient before comparing.
    #[arg(long, value_name = "SIZE")]
    pub inject_fault: Option<f64>,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-4)]
    pub delta: f64,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    }
}

/// Parses arguments, runs the command and reports errors on stderr.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
