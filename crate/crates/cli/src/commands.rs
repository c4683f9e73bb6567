use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use earlystop::checkpoint::Checkpoint;
use earlystop::cis::{self, InducedLabels};
use earlystop::data::{write_dataset, Elements, FileFormat, Sample};
use earlystop::diffcore::{grad_check_with_fault, GradCheckReport};
use earlystop::eval::{self, pareto_auc, pareto_frontier, ParetoPoint, SweepConfig};
use earlystop::larm;
use earlystop::model::{init_model, BoundModel, ModelConfig, ModelParams};
use earlystop::ppo::{self, EpisodeRollout};
use earlystop::train::{Method, Trainer};
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_assignment, Generator, RunConfig};
use crate::report::{self, StatsRow};
use crate::{CliError, GenDataArgs, GradcheckArgs, RunArgs, SweepArgs, TrainArgs};

/// Failure threshold of the gradient self-check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn push<T: Into<toml::Value>>(out: &mut Vec<(String, toml::Value)>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        out.push((key.to_string(), v.into()));
    }
}

fn path_value(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn int(v: Option<usize>) -> Option<i64> {
    v.map(|x| x as i64)
}

fn set_overrides(set: &[String]) -> Result<Vec<(String, toml::Value)>, CliError> {
    Ok(set
        .iter()
        .map(|a| parse_assignment(a))
        .collect::<anyhow::Result<_>>()?)
}

impl RunArgs {
    /// Flags as dotted-key overrides; `--set` entries come last and win.
    pub fn overrides(&self) -> Result<Vec<(String, toml::Value)>, CliError> {
        let mut o = Vec::new();
        push(&mut o, "out_dir", path_value(&self.out));
        push(&mut o, "method", self.method.clone());
        push(&mut o, "seed", self.seed.map(|s| s as i64));
        push(&mut o, "data.path", path_value(&self.data));
        push(&mut o, "data.val_path", path_value(&self.val_data));
        push(&mut o, "train.mu", self.mu);
        push(&mut o, "train.learning_rate", self.lr);
        push(&mut o, "train.batch_size", int(self.batch_size));
        push(&mut o, "train.epochs", int(self.epochs));
        push(&mut o, "train.lambda", self.lambda);
        push(&mut o, "train.rho", self.rho);
        push(&mut o, "train.epsilon", self.epsilon);
        push(&mut o, "train.gamma", self.gamma);
        push(&mut o, "train.update_passes", int(self.update_passes));
        push(&mut o, "model.hidden_dim", int(self.hidden_dim));
        o.extend(set_overrides(&self.set)?);
        Ok(o)
    }

    pub fn load(&self) -> Result<RunConfig, CliError> {
        let mut config = RunConfig::load(self.config.as_deref(), &self.overrides()?)?;
        // relative data paths in a config file are relative to that file
        if let Some(base) = self.config.as_deref().and_then(Path::parent) {
            for p in [&mut config.data.path, &mut config.data.val_path] {
                if let Some(path) = p.as_mut() {
                    let from_flag = [&self.data, &self.val_data]
                        .iter()
                        .any(|f| f.as_ref() == Some(path));
                    if path.is_relative() && !from_flag {
                        *path = base.join(&*path);
                    }
                }
            }
        }
        Ok(config)
    }
}

fn out_dir(config: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = config
        .out_dir
        .clone()
        .ok_or_else(|| CliError::config("no output directory: pass --out or set out_dir"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn echo_config(config: &RunConfig, dir: &Path) -> Result<(), CliError> {
    fs::write(dir.join("config.toml"), config.to_toml()?).context("writing config.toml")?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    generator: Generator,
    spec: serde_json::Value,
    seed: u64,
    format: FileFormat,
    samples: usize,
    file: &'a str,
}

pub fn manifest_path(data: &Path) -> PathBuf {
    let mut name = data.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    data.with_file_name(name)
}

pub fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    if args.window.as_ref().is_some_and(|w| w.len() != 2) {
        return Err(CliError::config("--window takes two values, e.g. 10,30"));
    }
    let mut o = Vec::new();
    push(&mut o, "data.generator", args.generator.clone());
    push(&mut o, "data.n", int(args.n));
    push(&mut o, "data.t_end", int(args.t_end));
    push(&mut o, "data.num_classes", int(args.num_classes));
    push(&mut o, "data.motif_len", int(args.motif_len));
    push(
        &mut o,
        "data.window",
        args.window
            .as_ref()
            .map(|w| w.iter().map(|&x| x as i64).collect::<Vec<_>>()),
    );
    push(&mut o, "data.noise_sigma", args.noise_sigma);
    push(&mut o, "data.seed", args.seed.map(|s| s as i64));
    o.extend(set_overrides(&args.set)?);
    let config = RunConfig::load(args.config.as_deref(), &o)?;
    let generator = config.data.generator.unwrap_or(Generator::Motif);
    let dataset = config.generate()?;
    let spec = match generator {
        Generator::Motif => serde_json::to_value(config.motif_spec()),
        Generator::DriftWalk => serde_json::to_value(config.drift_walk_spec()),
    }
    .context("serializing generator spec")?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_dataset(&dataset, FileFormat::Jsonl, &args.out)?;
    let manifest = Manifest {
        generator,
        spec,
        seed: config.data_seed(),
        format: FileFormat::Jsonl,
        samples: dataset.len(),
        file: args
            .out
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default(),
    };
    let text = serde_json::to_string_pretty(&manifest).context("serializing manifest")?;
    fs::write(manifest_path(&args.out), text + "\n").context("writing manifest")?;
    println!("wrote {} samples to {}", dataset.len(), args.out.display());
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let config = args.run.load()?;
    config.check_method_fields(&[config.method])?;
    let dir = out_dir(&config)?;
    let (train_set, val_set) = config.datasets()?;
    let trainer_config = config.trainer(config.method)?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.trainer.method() != config.method {
                return Err(CliError::config(format!(
                    "checkpoint was trained with {}, config selects {}",
                    ck.trainer.method(),
                    config.method
                )));
            }
            Trainer::resume(ck.params, ck.adam, trainer_config, ck.epoch)?
        }
        None => Trainer::new(&config.model(&train_set)?, trainer_config)?,
    };
    echo_config(&config, &dir)?;
    let labels: Vec<usize> = val_set.samples.iter().map(|s| s.label).collect();
    let mut rows = Vec::new();
    while trainer.epoch < config.train.epochs {
        let stats = trainer.run_epoch(&train_set)?;
        let traces = trainer.params.trace_batch(&val_set.samples)?;
        let mut rng = eval::eval_rng(config.seed, config.train.mu, trainer.epoch);
        let e = eval::evaluate_traces(config.method, &traces, &labels, 1, &mut rng);
        eprintln!(
            "epoch {:>3}  loss {:.5}  val accuracy {:.4}  val mean T {:.3}",
            stats.epoch, stats.loss, e.accuracy, e.mean_t
        );
        rows.push(StatsRow {
            epoch: stats.epoch,
            loss: stats.loss,
            loss_yhat: stats.loss_yhat,
            loss_pi: stats.loss_pi,
            val_accuracy: e.accuracy,
            val_mean_t: e.mean_t,
        });
    }
    report::write_stats(&dir.join("stats.csv"), &rows, args.resume.is_some())?;
    Checkpoint::from_trainer(&trainer).save(dir.join("checkpoint.json"))?;
    println!(
        "trained {} to epoch {}; outputs in {}",
        config.method,
        trainer.epoch,
        dir.display()
    );
    Ok(())
}

pub fn eval(args: &crate::EvalArgs) -> Result<(), CliError> {
    let config = args.run.load()?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let method = ck.trainer.method();
    let (_, val_set) = config.datasets()?;
    let mut rng = eval::eval_rng(config.seed, ck.trainer.mu(), ck.epoch);
    let e = eval::evaluate_repeated(&ck.params, &val_set, method, args.repeats, &mut rng)?;
    let result = json!({
        "method": method,
        "mu": ck.trainer.mu(),
        "epoch": ck.epoch,
        "samples": val_set.len(),
        "mean_T": e.mean_t,
        "accuracy": e.accuracy,
    });
    if let Some(dir) = &config.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(
            dir.join("eval.json"),
            serde_json::to_string_pretty(&result).context("serializing")? + "\n",
        )
        .context("writing eval.json")?;
    }
    println!(
        "{method} mean_T {:.4} accuracy {:.4} ({} samples)",
        e.mean_t,
        e.accuracy,
        val_set.len()
    );
    Ok(())
}

pub fn sweep(args: &SweepArgs) -> Result<(), CliError> {
    let mut run = args.run.clone();
    if let Some(methods) = &args.methods {
        let list = methods
            .iter()
            .map(|m| format!("{:?}", m.trim()))
            .collect::<Vec<_>>()
            .join(", ");
        run.set.insert(0, format!("sweep.methods=[{list}]"));
    }
    if let Some(mus) = &args.mu_list {
        let list = mus
            .iter()
            .map(|m| format!("{m:?}"))
            .collect::<Vec<_>>()
            .join(", ");
        run.set.insert(0, format!("sweep.mu=[{list}]"));
    }
    if args.plot {
        run.set.insert(0, "sweep.plot=true".into());
    }
    let config = run.load()?;
    let methods = config.sweep_methods();
    config.check_method_fields(&methods)?;
    let dir = out_dir(&config)?;
    let (train_set, val_set) = config.datasets()?;
    let model = config.model(&train_set)?;
    echo_config(&config, &dir)?;

    let mut all_points: Vec<ParetoPoint> = Vec::new();
    let mut frontiers = Vec::new();
    let mut aucs = Vec::new();
    for &method in &methods {
        let sweep_config = SweepConfig {
            model: model.clone(),
            trainer: config.trainer(method)?,
            mu_list: config.sweep.mu.clone(),
            eval_repeats: config.sweep.eval_repeats,
            seed: config.seed,
        };
        let runs = eval::sweep_runs(&sweep_config, &train_set, &val_set, |p| {
            eprintln!(
                "{} mu {:<6} epoch {:>3}  mean T {:.3}  accuracy {:.4}",
                p.method, p.mu, p.epoch, p.mean_t, p.accuracy
            );
        })?;
        let points: Vec<ParetoPoint> = runs.into_iter().flat_map(|r| r.points).collect();
        let frontier = pareto_frontier(&points);
        let auc = pareto_auc(&frontier, model.t_end as f64);
        report::write_frontier(&dir.join(format!("frontier_{method}.csv")), &frontier)?;
        println!(
            "{method}: {} points, {} on the frontier, AUC {auc:.6}",
            points.len(),
            frontier.points.len()
        );
        all_points.extend(points);
        frontiers.push((method, frontier));
        aucs.push((method, auc));
    }
    report::write_points(&dir.join("points.csv"), &all_points)?;
    report::write_auc(&dir.join("auc.csv"), &aucs)?;
    if config.sweep.plot {
        report::write_svg(&dir.join("frontier.svg"), &frontiers, model.t_end as f64)?;
    }
    Ok(())
}

/// The model and two samples used by the gradient self-check.
pub fn gradcheck_toy() -> (ModelParams, Vec<Sample>) {
    let config = ModelConfig {
        seed: 17,
        ..ModelConfig::dense(2, 4, 4, 3, 5)
    };
    let samples = (0..2)
        .map(|k| Sample {
            label: 2 * k,
            elements: Elements::Dense(
                (0..5)
                    .map(|t| {
                        vec![
                            0.3 + 0.5 * (t as f64 + k as f64).sin(),
                            0.2 * t as f64 - 0.4 * k as f64 + 0.1,
                        ]
                    })
                    .collect(),
            ),
        })
        .collect();
    (init_model(&config).expect("valid toy model"), samples)
}

/// Gradient checks of the three training losses on the toy model, with
/// labels, masks and rollouts held fixed.
pub fn gradcheck_reports(
    fault: f64,
    delta: f64,
) -> Result<Vec<(Method, GradCheckReport)>, CliError> {
    let (params, samples) = gradcheck_toy();
    let refs: Vec<&Sample> = samples.iter().collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let c = params.config.num_classes;
    let traces = params.trace_batch(&samples)?;
    let induced: Vec<InducedLabels> = samples
        .iter()
        .zip(&traces)
        .map(|(s, tr)| cis::induced_policy_labels(&s.one_hot(c), tr, 0.02))
        .collect();
    let masks = vec![
        vec![false, true, false, false, true],
        vec![true, false, false, true, false],
    ];
    let rollouts: Vec<EpisodeRollout> = vec![
        ppo::episode_from_stop(&traces[0], &samples[0].one_hot(c), 3, 0.02)?,
        ppo::episode_from_stop(&traces[1], &samples[1].one_hot(c), 5, 0.02)?,
    ];
    let model_config = params.config.clone();
    let layout = params.layout();
    let bound = |vars: &[earlystop::diffcore::Var]| BoundModel {
        config: model_config.clone(),
        layout,
        vars: vars.to_vec(),
    };
    let mut reports = Vec::new();
    for method in Method::ALL {
        let mut p = params.tensors.clone();
        let report = grad_check_with_fault(
            |tape, vars| {
                let trace = bound(vars).forward(tape, &refs)?;
                Ok(match method {
                    Method::Cis => {
                        cis::cis_loss_on_tape(tape, &trace, &labels, &induced, c, 1.0)?.total
                    }
                    Method::Larm => {
                        larm::larm_loss_on_tape(tape, &trace, &labels, &masks, c, 0.05)?.total
                    }
                    Method::Ppo => {
                        ppo::ppo_loss_on_tape(tape, &trace, &labels, &rollouts, c, 0.2, 1.0)?.total
                    }
                })
            },
            &mut p,
            delta,
            fault,
        )?;
        reports.push((method, report));
    }
    Ok(reports)
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let reports = gradcheck_reports(args.inject_fault.unwrap_or(0.0), args.delta)?;
    println!(
        "{:<6} {:>7} {:>14}  {:<18} status",
        "loss", "params", "max_rel_error", "worst"
    );
    let mut failed = Vec::new();
    for (method, r) in &reports {
        let ok = r.max_rel_error < GRADCHECK_TOLERANCE;
        let worst = r
            .worst
            .as_ref()
            .map(|(n, i)| format!("{n}[{i}]"))
            .unwrap_or_default();
        println!(
            "{:<6} {:>7} {:>14.3e}  {:<18} {}",
            method.as_str(),
            r.param_count,
            r.max_rel_error,
            worst,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(method.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::validation(format!(
            "gradient check failed for {} (tolerance {GRADCHECK_TOLERANCE:e})",
            failed.join(", ")
        )))
    }
}
