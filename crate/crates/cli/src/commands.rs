//! `gen-data`, `train` and `eval`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use optima_core::augmentation::AugmentationFamily;
use optima_core::data::{corrupt_dataset, write_csv, Dataset, Task};
use optima_core::distributions::{
    kl_diagonal_gaussians, DiagonalGaussian, NoiseSource, HALF_LN_2PI,
};
use optima_core::elbo::{pac_bayes_bound, pac_bayes_complexity, AugmentationMode};
use optima_core::metrics::{
    argmax, basic_metrics, entropy_summary, expected_calibration_error, BasicMetric,
    EntropySummary, PredictionLog, ReliabilityTable,
};
use optima_core::model::{forward, predict, ModelState, Prediction, TestTimeAugmentation};
use optima_core::theory::TheoryReport;
use optima_core::trainer::{TrainHooks, Trainer, Variant};
use serde::{Deserialize, Serialize};

use crate::config::{variant, Arm, OodConfig, RunConfig, Split};
use crate::error::{io_err, CliError, CliResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CHECKPOINT_FORMAT: &str = "optima-checkpoint/1";
pub const REPORT_FORMAT: &str = "optima-report/1";

pub fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        CliError::Config(format!("{}: at `{at}`: {}", path.display(), e.into_inner()))
    })
}

/// Worker count from `OPTIMA_THREADS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("OPTIMA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Maps `f` over `items` on up to `workers` threads, keeping input order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                *slots[i].lock().expect("no poisoned slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("no poisoned slot")
                .expect("every slot filled")
        })
        .collect()
}

pub fn gen_data(config: &RunConfig, out: &Path) -> CliResult<()> {
    let (train, test) = config.load_data()?;
    write_csv(&out.join("train.csv"), &train)?;
    write_csv(&out.join("test.csv"), &test)?;
    println!(
        "wrote {} train and {} test rows ({}, seed {}) to {}",
        train.len(),
        test.len(),
        train.task,
        config.seed,
        out.display()
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: String,
    pub arm: String,
    pub name: String,
    pub task: Task,
    pub variant: Variant,
    pub mode: AugmentationMode,
    pub step: u64,
    pub model: ModelState,
    pub q_phi: DiagonalGaussian,
    pub family: AugmentationFamily,
}

pub fn arm_dir(out: &Path, arm: &Arm) -> PathBuf {
    out.join(&arm.id)
}

/// Plug-in metric of the posterior-mean network: MSE or accuracy.
pub fn plug_in_metric(state: &ModelState, data: &Dataset) -> f64 {
    let Ok(out) = forward(&state.mean_model(), None, &data.inputs) else {
        return f64::NAN;
    };
    let k = out.cols();
    let n = data.len() as f64;
    match data.task {
        Task::Regression => {
            out.data()
                .iter()
                .zip(&data.targets)
                .map(|(m, y)| (m - y).powi(2))
                .sum::<f64>()
                / n
        }
        Task::Classification { .. } => {
            out.data()
                .chunks(k)
                .enumerate()
                .filter(|(i, o)| argmax(o) == data.label(*i))
                .count() as f64
                / n
        }
    }
}

fn train_arm(
    config: &RunConfig,
    arm: &Arm,
    train: &Dataset,
    test: &Dataset,
    out: &Path,
) -> CliResult<(String, f64)> {
    let t0 = Instant::now();
    let spec = config.network(train)?;
    let hooks = TrainHooks {
        train_metric: Some(Box::new(|m: &ModelState, _: &DiagonalGaussian| {
            plug_in_metric(m, train)
        })),
        test_metric: Some(Box::new(|m: &ModelState, _: &DiagonalGaussian| {
            plug_in_metric(m, test)
        })),
        ..TrainHooks::default()
    };
    let mut trainer = Trainer::new(train, &spec, &arm.family, arm.train.clone(), variant(&spec))
        .map_err(|e| CliError::Config(format!("arm {}: {e}", arm.id)))?
        .with_hooks(hooks);
    let result = trainer.run();
    let dir = arm_dir(out, arm);
    write_file(&dir.join("trace.csv"), &trainer.trace.to_csv())?;
    result.map_err(|e| {
        CliError::Numerical(format!(
            "arm {}: {e} (partial trace in {})",
            arm.id,
            dir.join("trace.csv").display()
        ))
    })?;
    let step = trainer.optimizer.step;
    let last = trainer.trace.rows.last().map(|r| (r.total, r.phi.clone()));
    let outcome = trainer.into_outcome();
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: VERSION.into(),
        arm: arm.id.clone(),
        name: arm.name.clone(),
        task: train.task,
        variant: variant(&spec),
        mode: arm.train.mode,
        step,
        model: outcome.model,
        q_phi: outcome.q_phi,
        family: arm.family.clone(),
    };
    write_file(&dir.join("checkpoint.json"), &to_json(&ck))?;
    let mut line = format!("{:<14} steps {step}", arm.id);
    if let Some((total, phi)) = last {
        line.push_str(&format!(", final elbo {total:.4}"));
        let coords = ck.family.kind.coordinate_names();
        for (name, (m, s)) in coords.iter().zip(phi) {
            line.push_str(&format!(", {name} {m:.4}/{s:.4}"));
        }
    }
    Ok((line, t0.elapsed().as_secs_f64()))
}

pub fn train(config: &RunConfig, out: &Path) -> CliResult<()> {
    let (train, test) = config.load_data()?;
    let family = config.family(&train)?;
    config.network(&train)?;
    let arms = config.arms(&family);
    write_file(&out.join("config.json"), &to_json(config))?;
    let results = parallel_map(&arms, worker_count(), |arm| {
        train_arm(config, arm, &train, &test, out)
    });
    let mut timings = BTreeMap::new();
    let mut first_err = None;
    for (arm, r) in arms.iter().zip(results) {
        match r {
            Ok((line, secs)) => {
                println!("{line}");
                timings.insert(arm.id.clone(), secs);
            }
            Err(e) => {
                eprintln!("{e}");
                first_err.get_or_insert(e);
            }
        }
    }
    // Wall-clock is the one nondeterministic output and lives in its own file.
    write_file(&out.join("timings.json"), &to_json(&timings))?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodResult {
    pub corruption: String,
    pub severity: f64,
    /// Predictive entropy as the detection score, corrupted as positives.
    pub auroc: f64,
    pub entropy: EntropySummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacBayesReport {
    pub kl_theta: f64,
    pub kl_phi: f64,
    pub n: usize,
    pub delta: f64,
    pub complexity: f64,
    /// Training 0-1 error; bounded losses only, so absent for regression.
    pub empirical_risk: Option<f64>,
    pub bound: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub coordinates: Vec<String>,
    pub step: Vec<u64>,
    pub phi_mean: Vec<Vec<f64>>,
    pub phi_sigma: Vec<Vec<f64>>,
    pub dphi_mean: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub train_metric: Vec<Option<f64>>,
    pub test_metric: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub id: String,
    pub name: String,
    pub mode: AugmentationMode,
    pub n_examples: usize,
    pub metric: BasicMetric,
    pub ece: Option<f64>,
    pub reliability: Option<ReliabilityTable>,
    /// Categorical entropy in nats, or the Gaussian predictive entropy.
    pub entropy: EntropySummary,
    pub ood: OodResult,
    pub pac_bayes: PacBayesReport,
    /// `(coordinate, mean, sigma)` of the final augmentation distribution.
    pub final_phi: Vec<(String, f64, f64)>,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub version: String,
    pub seed: u64,
    pub split: Split,
    pub config: RunConfig,
    pub arms: Vec<ArmReport>,
    pub theory: Option<Vec<TheoryReport>>,
    pub wall_clock_seconds: Option<BTreeMap<String, f64>>,
}

struct Evaluated {
    log: PredictionLog,
    entropies: Vec<f64>,
}

fn evaluate(
    ck: &Checkpoint,
    config: &RunConfig,
    data: &Dataset,
    noise: NoiseSource,
) -> CliResult<Evaluated> {
    let augment = (config.eval.marginalize_aug && ck.mode != AugmentationMode::Off).then_some(
        TestTimeAugmentation {
            family: &ck.family,
            q_phi: (ck.mode == AugmentationMode::Learned).then_some(&ck.q_phi),
        },
    );
    let pred = predict(
        &ck.model,
        &data.inputs,
        config.eval.n_mc_samples,
        augment,
        noise,
    )?;
    Ok(match pred {
        Prediction::Classes(probs) => {
            let labels = (0..data.len()).map(|i| data.label(i)).collect();
            let (_, entropies) = entropy_summary(&probs)?;
            Evaluated {
                log: PredictionLog::classification(probs, labels)?,
                entropies,
            }
        }
        Prediction::Values {
            mean,
            variance,
            noise_var,
        } => {
            let total: Vec<f64> = variance.iter().map(|v| v + noise_var).collect();
            let entropies = total
                .iter()
                .map(|v| HALF_LN_2PI + 0.5 + 0.5 * v.ln())
                .collect();
            Evaluated {
                log: PredictionLog::regression(mean, total, data.targets.clone())?,
                entropies,
            }
        }
    })
}

fn summarize(h: &[f64]) -> EntropySummary {
    EntropySummary {
        mean: h.iter().sum::<f64>() / h.len() as f64,
        min: h.iter().copied().fold(f64::INFINITY, f64::min),
        max: h.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

pub fn read_trajectory(path: &Path) -> CliResult<Trajectory> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| io_err(path, e))?
        .iter()
        .map(String::from)
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("{}: no `{name}` column", path.display())))
    };
    let coordinates: Vec<String> = header
        .iter()
        .filter_map(|h| h.strip_suffix("_mean"))
        .filter(|c| *c != "dphi")
        .map(String::from)
        .collect();
    let (c_step, c_dphi, c_loss, c_train, c_test) = (
        col("step")?,
        col("dphi_mean")?,
        col("train_loss")?,
        col("train_metric")?,
        col("test_metric")?,
    );
    let c_phi: Vec<(usize, usize)> = coordinates
        .iter()
        .map(|c| Ok((col(&format!("{c}_mean"))?, col(&format!("{c}_sigma"))?)))
        .collect::<CliResult<_>>()?;
    let mut t = Trajectory {
        coordinates,
        ..Trajectory::default()
    };
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let num = |i: usize| -> CliResult<f64> {
            rec.get(i).unwrap_or("").parse().map_err(|_| {
                CliError::Config(format!(
                    "{}: row {}: bad number in column {i}",
                    path.display(),
                    line + 2
                ))
            })
        };
        let opt = |i: usize| -> CliResult<Option<f64>> {
            if rec.get(i).unwrap_or("").is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        t.step.push(num(c_step)? as u64);
        t.dphi_mean.push(num(c_dphi)?);
        t.train_loss.push(num(c_loss)?);
        t.train_metric.push(opt(c_train)?);
        t.test_metric.push(opt(c_test)?);
        t.phi_mean.push(
            c_phi
                .iter()
                .map(|(m, _)| num(*m))
                .collect::<CliResult<_>>()?,
        );
        t.phi_sigma.push(
            c_phi
                .iter()
                .map(|(_, s)| num(*s))
                .collect::<CliResult<_>>()?,
        );
    }
    Ok(t)
}

fn eval_arm(
    config: &RunConfig,
    arm: &Arm,
    train: &Dataset,
    data: &Dataset,
    ood: OodConfig,
    out: &Path,
) -> CliResult<ArmReport> {
    let dir = arm_dir(out, arm);
    let ck: Checkpoint = read_json(&dir.join("checkpoint.json"))?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(CliError::Config(format!(
            "arm {}: unsupported checkpoint format `{}`",
            arm.id, ck.format
        )));
    }
    if ck.task != data.task || ck.model.spec.input_dim != data.dim() {
        return Err(CliError::Config(format!(
            "arm {}: checkpoint is {} with input width {}, data is {} with input width {}",
            arm.id,
            ck.task,
            ck.model.spec.input_dim,
            data.task,
            data.dim()
        )));
    }
    let noise = NoiseSource::new(config.seed).named("eval");
    let clean = evaluate(&ck, config, data, noise)?;
    // Shared noise: a zero-severity corruption scores exactly like the clean set.
    let shifted = evaluate(
        &ck,
        config,
        &corrupt_dataset(data, ood.corruption, ood.severity)?,
        noise,
    )?;
    let auroc = optima_core::metrics::auroc(&clean.entropies, &shifted.entropies)?;
    let metric = basic_metrics(&clean.log)?;
    let (ece, reliability) = match &clean.log {
        PredictionLog::Classification { .. } => {
            let (e, t) = expected_calibration_error(&clean.log)?;
            (Some(e), Some(t))
        }
        PredictionLog::Regression { .. } => (None, None),
    };
    let prior_std = config.train.prior_theta_std;
    let kl_theta = if ck.variant == Variant::FullVi {
        ck.model.kl_theta(prior_std)
    } else {
        0.0
    };
    let kl_phi = if ck.mode == AugmentationMode::Learned {
        kl_diagonal_gaussians(&ck.q_phi, &ck.family.phi_prior)?
    } else {
        0.0
    };
    let delta = config.eval.pac_bayes_delta;
    let complexity = pac_bayes_complexity(kl_theta + kl_phi, train.len(), delta)?;
    let empirical_risk = match train.task {
        Task::Classification { .. } => {
            let tr = evaluate(
                &ck,
                config,
                train,
                NoiseSource::new(config.seed).named("risk"),
            )?;
            Some(1.0 - basic_metrics(&tr.log)?.value())
        }
        Task::Regression => None,
    };
    let bound = empirical_risk
        .map(|r| pac_bayes_bound(r, kl_theta + kl_phi, train.len(), delta))
        .transpose()?;
    let final_phi = match ck.mode {
        AugmentationMode::Off => Vec::new(),
        AugmentationMode::Fixed => ck.family.summary(),
        AugmentationMode::Learned => ck.family.with_phi(ck.q_phi.mean.clone()).summary(),
    };
    Ok(ArmReport {
        id: arm.id.clone(),
        name: arm.name.clone(),
        mode: ck.mode,
        n_examples: data.len(),
        metric,
        ece,
        reliability,
        entropy: summarize(&clean.entropies),
        ood: OodResult {
            corruption: ood.corruption.name().into(),
            severity: ood.severity,
            auroc,
            entropy: summarize(&shifted.entropies),
        },
        pac_bayes: PacBayesReport {
            kl_theta,
            kl_phi,
            n: train.len(),
            delta,
            complexity,
            empirical_risk,
            bound,
        },
        final_phi,
        trajectory: read_trajectory(&dir.join("trace.csv"))?,
    })
}

pub fn eval(config: &RunConfig, out: &Path) -> CliResult<()> {
    let (train, test) = config.load_data()?;
    let family = config.family(&train)?;
    let data = match config.eval.split {
        Split::Train => &train,
        Split::Test => &test,
    };
    let ood = config.ood(data.task);
    let arms = config.arms(&family);
    let reports = parallel_map(&arms, worker_count(), |arm| {
        eval_arm(config, arm, &train, data, ood, out)
    });
    let arms: Vec<ArmReport> = reports.into_iter().collect::<CliResult<_>>()?;
    let theory_path = out.join("verify.json");
    let theory = theory_path
        .exists()
        .then(|| read_json(&theory_path))
        .transpose()?;
    let timing_path = out.join("timings.json");
    let wall_clock_seconds = timing_path
        .exists()
        .then(|| read_json(&timing_path))
        .transpose()?;
    for a in &arms {
        let ece = a.ece.map(|e| format!(", ece {e:.4}")).unwrap_or_default();
        let metric = match a.metric {
            BasicMetric::Accuracy(v) => format!("accuracy {v:.4}"),
            BasicMetric::Mse(v) => format!("mse {v:.4}"),
        };
        println!("{:<14} {metric}{ece}, ood auroc {:.4}", a.id, a.ood.auroc);
    }
    let report = Report {
        format: REPORT_FORMAT.into(),
        version: VERSION.into(),
        seed: config.seed,
        split: config.eval.split,
        config: config.clone(),
        arms,
        theory,
        wall_clock_seconds,
    };
    write_file(&out.join("report.json"), &to_json(&report))
}
