//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any hard criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use earlystop::cis::{cis_loss, CisConfig};
use earlystop::data::{gen_motif, split, Dataset, MotifSpec};
use earlystop::eval::{
    eval_rng, evaluate, pareto_auc, pareto_auc_bounds, pareto_frontier, sweep, Frontier,
    ParetoPoint, SweepConfig, DEFAULT_MU_SWEEP,
};
use earlystop::larm::{larm_loss, sample_stop_time, stop_distribution, LarmConfig};
use earlystop::model::{ModelConfig, PredictionTrace};
use earlystop::ppo::{clipped_surrogate, PpoConfig};
use earlystop::reward::{optimal_stop_time, RewardCurve};
use earlystop::train::{Method, Trainer, TrainerConfig};
use earlystop_cli::commands::gradcheck_reports;
use earlystop_cli::report::{write_auc, write_frontier, write_points};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    /// Failures of advisory criteria are reported but do not fail the run.
    hard: bool,
    detail: String,
}

impl Outcome {
    fn hard(pass: bool, detail: String) -> Self {
        Outcome {
            pass,
            hard: true,
            detail,
        }
    }
}

fn report(n: usize, name: &str, o: &Outcome) {
    let status = match (o.pass, o.hard) {
        (true, _) => "PASS",
        (false, true) => "FAIL",
        (false, false) => "FAIL (advisory)",
    };
    println!("criterion {n} [{name}]: {status} - {}", o.detail);
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let reports = gradcheck_reports(0.0, 1e-4).expect("gradient check runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = reports
        .iter()
        .map(|(_, r)| r.max_rel_error)
        .fold(0.0, f64::max);
    let detail = reports
        .iter()
        .map(|(m, r)| format!("{m} {:.2e}", r.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::hard(
        reports.len() == 3 && worst < 1e-4 && secs < 30.0,
        format!("{detail}; {secs:.2}s"),
    )
}

/// The step that is at least as good as every step and strictly better
/// than every earlier one.
fn enumerate_optimum(r: &[f64]) -> usize {
    let hits: Vec<usize> = (0..r.len())
        .filter(|&t| (0..r.len()).all(|s| r[t] >= r[s] && (s >= t || r[t] > r[s])))
        .collect();
    assert_eq!(hits.len(), 1);
    hits[0] + 1
}

fn stopping_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let start = Instant::now();
    let mut mismatches = 0;
    for i in 0..1000 {
        let t_end = rng.random_range(1..=64);
        // coarse values and a zero penalty on every third curve produce ties
        let ce: Vec<f64> = (0..t_end)
            .map(|_| (rng.random::<f64>() * 8.0).floor() * 0.25)
            .collect();
        let mu = if i % 3 == 0 {
            0.0
        } else {
            rng.random::<f64>() * 0.1
        };
        let curve = RewardCurve::from_cross_entropies(&ce, mu);
        if optimal_stop_time(&curve) != enumerate_optimum(&curve.values) {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::hard(
        mismatches == 0 && secs < 5.0,
        format!("{mismatches} mismatches on 1000 curves; {secs:.3}s"),
    )
}

fn brute_frontier(points: &[ParetoPoint]) -> Vec<(f64, f64)> {
    let mut kept: Vec<(f64, f64)> = Vec::new();
    for p in points {
        let dominated = points.iter().any(|q| {
            q.mean_t <= p.mean_t
                && q.accuracy >= p.accuracy
                && (q.mean_t < p.mean_t || q.accuracy > p.accuracy)
        });
        if !dominated && !kept.contains(&(p.mean_t, p.accuracy)) {
            kept.push((p.mean_t, p.accuracy));
        }
    }
    kept.sort_by(|a, b| a.0.total_cmp(&b.0));
    kept
}

/// Integrates the best accuracy reached by time `x` over `[lo, hi]`.
fn integrate(cloud: &[(f64, f64)], lo: f64, hi: f64) -> f64 {
    let mut cuts: Vec<f64> = cloud
        .iter()
        .map(|p| p.0.clamp(lo, hi))
        .chain([lo, hi])
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut area = 0.0;
    for w in cuts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let level = cloud
            .iter()
            .filter(|p| p.0 <= mid)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        area += (w[1] - w[0]) * level;
    }
    area / (hi - lo)
}

fn pareto() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut frontier_bad, mut worst_auc) = (0, 0.0f64);
    for i in 0..100 {
        let n = rng.random_range(1..=200);
        let cloud: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                if i % 2 == 0 {
                    // grid values force ties in both coordinates
                    (
                        rng.random_range(1..=20) as f64,
                        rng.random_range(0..=10) as f64 / 10.0,
                    )
                } else {
                    (rng.random::<f64>() * 50.0, rng.random::<f64>())
                }
            })
            .collect();
        let points: Vec<ParetoPoint> = cloud
            .iter()
            .map(|&(t, a)| ParetoPoint::new(Method::Cis, 0.01, 1, t, a))
            .collect();
        let f = pareto_frontier(&points);
        let got: Vec<(f64, f64)> = f.points.iter().map(|p| (p.mean_t, p.accuracy)).collect();
        if got != brute_frontier(&points) {
            frontier_bad += 1;
        }
        worst_auc = worst_auc.max((pareto_auc(&f, 50.0) - integrate(&cloud, 0.0, 50.0)).abs());
        worst_auc =
            worst_auc.max((pareto_auc_bounds(&f, 5.0, 40.0) - integrate(&cloud, 5.0, 40.0)).abs());
    }
    Outcome::hard(
        frontier_bad == 0 && worst_auc <= 1e-12,
        format!("{frontier_bad} frontier mismatches on 100 clouds; max AUC error {worst_auc:.1e}"),
    )
}

fn random_policy(rng: &mut ChaCha8Rng, t_end: usize) -> Vec<[f64; 2]> {
    (0..t_end)
        .map(|_| {
            let stop = rng.random::<f64>();
            [1.0 - stop, stop]
        })
        .collect()
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_sum = 0.0f64;
    for _ in 0..1000 {
        let t_end = rng.random_range(1..=64);
        let pi = random_policy(&mut rng, t_end);
        worst_sum = worst_sum.max((stop_distribution(&pi, None).total() - 1.0).abs());
    }
    let pi: Vec<[f64; 2]> = random_policy(&mut rng, 12)
        .into_iter()
        .map(|[w, s]| [0.5 + 0.5 * w, 0.5 * s])
        .collect();
    let exact = stop_distribution(&pi, None).weights;
    let trials = 100_000;
    let mut counts = vec![0usize; pi.len()];
    for _ in 0..trials {
        counts[sample_stop_time(&pi, &mut rng) - 1] += 1;
    }
    let tv = 0.5
        * exact
            .iter()
            .zip(&counts)
            .map(|(p, &c)| (p - c as f64 / trials as f64).abs())
            .sum::<f64>();
    Outcome::hard(
        worst_sum <= 1e-9 && tv < 0.02,
        format!("max |sum - 1| {worst_sum:.1e} over 1000 traces; TV {tv:.4} at 1e5 rollouts"),
    )
}

fn worked_losses() -> Outcome {
    let cis_trace = PredictionTrace {
        yhat: vec![vec![0.5, 0.5], vec![0.9, 0.1]],
        pi: vec![[0.5, 0.5], [0.5, 0.5]],
    };
    let cis = cis_loss(&[1.0, 0.0], &cis_trace, 0.1, 1.0).total;
    let larm_trace = PredictionTrace {
        yhat: vec![vec![0.8, 0.2], vec![0.6, 0.4]],
        pi: vec![[0.5, 0.5], [0.5, 0.5]],
    };
    let larm = larm_loss(&[1.0, 0.0], &larm_trace, 0.1, None).total;
    let clip_hi = clipped_surrogate(2.0, 1.0, 0.2);
    let clip_lo = clipped_surrogate(0.5, -1.0, 0.2);
    let pass = (cis - 1.092401).abs() < 1e-6
        && (larm - 0.506675).abs() < 1e-6
        && (clip_hi - 1.2).abs() < 1e-6
        && (clip_lo + 0.8).abs() < 1e-6;
    Outcome::hard(
        pass,
        format!("cis {cis:.6}, larm {larm:.6}, clip {clip_hi:.6} / {clip_lo:.6}"),
    )
}

fn motif_data() -> (Dataset, Dataset) {
    let data = gen_motif(&MotifSpec {
        n: 2500,
        t_end: 50,
        num_classes: 2,
        motif_len: 3,
        window: (10, 30),
        noise_sigma: 0.1,
        amplitude: 1.0,
        seed: 2024,
    })
    .expect("motif data");
    split(&data, 0.2, 2024).expect("split")
}

fn model_config(bias: [f64; 2]) -> ModelConfig {
    ModelConfig {
        policy_bias_init: bias,
        seed: 1,
        ..ModelConfig::dense(2, 16, 16, 2, 50)
    }
}

fn learning(train: &Dataset, val: &Dataset) -> Outcome {
    let config = TrainerConfig::Cis(CisConfig {
        mu: 0.01,
        lambda: 1.0,
        learning_rate: 1e-2,
        batch_size: 128,
        epochs: 50,
        seed: 1,
    });
    let start = Instant::now();
    let mut trainer = Trainer::new(&model_config([0.0, 0.0]), config).expect("trainer");
    let mut last = None;
    for epoch in 1..=50 {
        trainer.run_epoch(train).expect("epoch");
        let e = evaluate(
            &trainer.params,
            val,
            Method::Cis,
            &mut eval_rng(1, 0.01, epoch),
        )
        .expect("evaluation");
        last = Some((epoch, e));
        if e.accuracy >= 0.9 && e.mean_t <= 40.0 {
            break;
        }
    }
    let (epoch, e) = last.expect("at least one epoch");
    let secs = start.elapsed().as_secs_f64();
    Outcome::hard(
        e.accuracy >= 0.9 && e.mean_t <= 40.0 && secs < 900.0,
        format!(
            "epoch {epoch}: accuracy {:.3}, mean T {:.2} on {} val samples; {secs:.1}s",
            e.accuracy,
            e.mean_t,
            val.samples.len()
        ),
    )
}

const COMPARISON_EPOCHS: usize = 10;

fn comparison(train: &Dataset, val: &Dataset, out: &Path) -> Outcome {
    let start = Instant::now();
    let (lr, batch_size, epochs, seed) = (1e-2, 128, COMPARISON_EPOCHS, 1);
    let recipes = [
        (
            [0.0, 0.0],
            TrainerConfig::Cis(CisConfig {
                mu: 0.0,
                lambda: 1.0,
                learning_rate: lr,
                batch_size,
                epochs,
                seed,
            }),
        ),
        (
            [0.0, 0.0],
            TrainerConfig::Larm(LarmConfig {
                mu: 0.0,
                rho: 0.9,
                learning_rate: lr,
                batch_size,
                epochs,
                seed,
            }),
        ),
        (
            [10.0, 0.0],
            TrainerConfig::Ppo(PpoConfig {
                mu: 0.0,
                gamma: 1.0,
                epsilon: 0.2,
                learning_rate: lr,
                batch_size,
                epochs,
                update_passes: 1,
                seed,
            }),
        ),
    ];
    // the three sweeps are independent
    let results: Vec<(Method, Vec<ParetoPoint>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = recipes
            .into_iter()
            .map(|(bias, trainer)| {
                scope.spawn(move || {
                    let method = trainer.method();
                    let config = SweepConfig {
                        model: model_config(bias),
                        trainer,
                        mu_list: DEFAULT_MU_SWEEP.to_vec(),
                        eval_repeats: 1,
                        seed,
                    };
                    (method, sweep(&config, train, val).expect("sweep"))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep thread"))
            .collect()
    });
    let mut all_points = Vec::new();
    let mut aucs = Vec::new();
    for (method, points) in results {
        let frontier: Frontier = pareto_frontier(&points);
        write_frontier(&out.join(format!("frontier_{method}.csv")), &frontier)
            .expect("frontier csv");
        aucs.push((method, pareto_auc(&frontier, 50.0)));
        all_points.extend(points);
    }
    write_points(&out.join("points.csv"), &all_points).expect("points csv");
    write_auc(&out.join("auc.csv"), &aucs).expect("auc csv");
    let [(_, cis), (_, larm), (_, ppo)] = aucs[..] else {
        unreachable!()
    };
    let secs = start.elapsed().as_secs_f64();
    let versus_larm = if cis >= larm - 0.05 {
        "within 0.05 of or above LARM"
    } else {
        "more than 0.05 below LARM"
    };
    Outcome::hard(
        cis >= ppo,
        format!(
            "AUC cis {cis:.4}, larm {larm:.4}, ppo {ppo:.4}; CIS {} PPO, {versus_larm}; \
             {epochs} epochs x 9 mu per method; {secs:.0}s; CSVs in {}",
            if cis >= ppo { ">=" } else { "<" },
            out.display()
        ),
    )
}

fn versus_larm_advisory(out: &Path) -> Outcome {
    let aucs: Vec<(String, f64)> = csv::Reader::from_path(out.join("auc.csv"))
        .expect("auc csv")
        .records()
        .map(|r| {
            let r = r.expect("row");
            (r[0].to_string(), r[1].parse().expect("auc"))
        })
        .collect();
    let get = |m: &str| {
        aucs.iter()
            .find(|(n, _)| n == m)
            .map(|a| a.1)
            .expect("method row")
    };
    let (cis, larm) = (get("cis"), get("larm"));
    Outcome {
        pass: cis >= larm - 0.05,
        hard: false,
        detail: format!(
            "cis {cis:.4} vs larm {larm:.4} (difference {:+.4})",
            cis - larm
        ),
    }
}

fn determinism(dir: &Path) -> Outcome {
    let run = |name: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_earlystop"))
            .current_dir(dir)
            .args([
                "sweep",
                "--out",
                name,
                "--methods",
                "cis",
                "--seed",
                "11",
                "--epochs",
                "3",
            ])
            .args([
                "--set",
                "data.n=300",
                "--set",
                "data.t_end=20",
                "--set",
                "data.window=[3, 12]",
            ])
            .output()
            .expect("sweep runs");
        assert!(
            status.status.success(),
            "{}",
            String::from_utf8_lossy(&status.stderr)
        );
        fs::read(dir.join(name).join("points.csv")).expect("points csv")
    };
    let (a, b) = (run("first"), run("second"));
    let rows = a.iter().filter(|&&c| c == b'\n').count().saturating_sub(1);
    Outcome::hard(
        a == b,
        format!("{rows} points; files identical: {}", a == b),
    )
}

fn main() -> ExitCode {
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&out);
    fs::create_dir_all(&out).expect("output directory");

    let mut outcomes: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient correctness", gradients()),
        (2, "stopping-time oracle", stopping_oracle()),
        (3, "pareto correctness", pareto()),
        (4, "stop distribution", normalization()),
        (5, "worked losses", worked_losses()),
    ];
    for (n, name, o) in &outcomes {
        report(*n, name, o);
    }
    let (train, val) = motif_data();
    let learned = learning(&train, &val);
    report(6, "motif learning", &learned);
    outcomes.push((6, "motif learning", learned));
    let compared = comparison(&train, &val, &out);
    report(7, "method comparison vs PPO", &compared);
    let advisory = versus_larm_advisory(&out);
    report(7, "method comparison vs LARM", &advisory);
    outcomes.push((7, "method comparison vs PPO", compared));
    outcomes.push((7, "method comparison vs LARM", advisory));
    let det = determinism(&out);
    report(8, "sweep determinism", &det);
    outcomes.push((8, "sweep determinism", det));

    let failed: Vec<String> = outcomes
        .iter()
        .filter(|(_, _, o)| o.hard && !o.pass)
        .map(|(n, name, _)| format!("{n} ({name})"))
        .collect();
    if failed.is_empty() {
        println!("acceptance: all hard criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
