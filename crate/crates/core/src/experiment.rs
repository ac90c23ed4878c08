//! Batches of independently seeded training runs, their aggregate and the
//! files written for each batch.
//!
//! Layout of an output directory:
//!
//! ```text
//! config.json          canonical config
//! runs.csv             run,seed,y0_first,final_loss[,final_loss2]
//! summary.json         aggregate, per-run results, failures, benchmark
//! run_000/history.csv  iteration,loss,lr,y0_first,elapsed_s
//!                      (iteration,loss1,loss2,lr,y0_first,elapsed_s for alg2)
//! run_000/error.json   only when the run aborted
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, LrSchedule};
use crate::problems::{build_problem, ProblemKind};
use crate::riccati;
use crate::solver::{alg1, alg2, Algorithm, AltTrainConfig, IterationRecord, RunReport, TrainConfig};

pub const VARIANCE_DEFINITION: &str =
    "population variance (divide by the number of completed runs) of the first component of y0";

/// Everything that determines a batch, as read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    pub n: usize,
    /// Coupling of the terminal weight; only used by `example1`.
    pub lambda: f64,
    /// `None` selects the problem's default.
    pub horizon: Option<f64>,
    /// `None` selects the problem's default.
    pub initial_state: Option<Vec<f64>>,
    pub algorithm: Algorithm,
    pub runs: usize,
    /// Run `r` uses seed `base_seed + r`.
    pub base_seed: u64,
    pub out: PathBuf,
    /// Runs trained concurrently.
    pub jobs: usize,

    pub maxstep: usize,
    pub batch_size: usize,
    pub steps: usize,
    /// Learning-rate switch points; with `lr_values` replaces the default
    /// schedule.
    pub lr_boundaries: Option<Vec<usize>>,
    pub lr_values: Option<Vec<f64>>,
    pub eval_batch_size: usize,
    pub eval_chunk: usize,
    pub record_every: usize,
    pub hidden: Option<Vec<usize>>,
    pub adam: AdamConfig,
    pub wall_clock: bool,
    pub kappa: usize,
    pub loss2_dt_weighted: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let alt = AltTrainConfig::default();
        let tc = alt.train;
        Self {
            problem: ProblemKind::Example1,
            n: 10,
            lambda: 0.0,
            horizon: None,
            initial_state: None,
            algorithm: Algorithm::Alg1,
            runs: 10,
            base_seed: 0,
            out: PathBuf::from("runs"),
            jobs: 1,
            maxstep: tc.maxstep,
            batch_size: tc.batch_size,
            steps: tc.steps,
            lr_boundaries: None,
            lr_values: None,
            eval_batch_size: tc.eval_batch_size,
            eval_chunk: tc.eval_chunk,
            record_every: tc.record_every,
            hidden: tc.hidden,
            adam: tc.adam,
            wall_clock: tc.wall_clock,
            kappa: alt.kappa,
            loss2_dt_weighted: alt.loss2_dt_weighted,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config("runs", "must be at least 1"));
        }
        if self.jobs == 0 {
            return Err(Error::config("jobs", "must be at least 1"));
        }
        if self.algorithm == Algorithm::Alg1 && !self.problem.has_explicit_cost() {
            return Err(Error::config(
                "algorithm",
                format!("{:?} has no explicit running cost; use alg2", self.problem).to_lowercase(),
            ));
        }
        if self.problem == ProblemKind::Example1 && !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", format!("must lie in [0, 1], got {}", self.lambda)));
        }
        self.schedule()?;
        self.alt_train_config(0)?.validate()?;
        build_problem(self.problem, self.n, self.lambda, self.horizon, self.initial_state.clone())?;
        Ok(())
    }

    fn schedule(&self) -> Result<Option<LrSchedule>> {
        match (&self.lr_boundaries, &self.lr_values) {
            (None, None) => Ok(None),
            (b, Some(v)) => LrSchedule::new(b.clone().unwrap_or_default(), v.clone()).map(Some),
            (Some(_), None) => Err(Error::config("lr_values", "required when lr_boundaries is set")),
        }
    }

    /// Solver settings for the run with the given seed.
    pub fn alt_train_config(&self, seed: u64) -> Result<AltTrainConfig> {
        Ok(AltTrainConfig {
            train: TrainConfig {
                maxstep: self.maxstep,
                batch_size: self.batch_size,
                steps: self.steps,
                schedule: self.schedule()?,
                seed,
                eval_batch_size: self.eval_batch_size,
                eval_chunk: self.eval_chunk,
                record_every: self.record_every,
                hidden: self.hidden.clone(),
                adam: self.adam,
                wall_clock: self.wall_clock,
            },
            kappa: self.kappa,
            loss2_dt_weighted: self.loss2_dt_weighted,
        })
    }

    pub fn seed(&self, run: usize) -> u64 {
        self.base_seed.wrapping_add(run as u64)
    }

    /// JSON with sorted keys. `out` and `jobs` are left out because they do
    /// not change any result.
    pub fn canonical_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(map) = &mut value {
            map.remove("out");
            map.remove("jobs");
        }
        value.to_string()
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical_json().as_bytes())
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }

    /// `y_0` first component of the Riccati benchmark, for `example1` only.
    pub fn benchmark(&self) -> Result<Option<f64>> {
        if self.problem != ProblemKind::Example1 {
            return Ok(None);
        }
        let a = self
            .initial_state
            .clone()
            .unwrap_or_else(|| vec![self.problem.default_initial_value(); self.n]);
        let horizon = self.horizon.unwrap_or(self.problem.default_horizon());
        Ok(Some(riccati::benchmark_y0(self.n, self.lambda, &a, horizon)?[0]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mean: f64,
    pub variance: f64,
    /// `|mean - benchmark| / |benchmark|`.
    pub relative_error: Option<f64>,
    pub benchmark: Option<f64>,
    pub values: Vec<f64>,
}

/// Mean, population variance and relative error of per-run values.
pub fn aggregate(values: &[f64], benchmark: Option<f64>) -> Result<AggregateReport> {
    if values.is_empty() {
        return Err(Error::EmptyAggregate);
    }
    let count = values.len() as f64;
    let mean = values.iter().sum::<f64>() / count;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
    Ok(AggregateReport {
        mean,
        variance,
        relative_error: benchmark.map(|b| (mean - b).abs() / b.abs()),
        benchmark,
        values: values.to_vec(),
    })
}

/// Per-run entry of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub y0: Vec<f64>,
    pub y0_std_err: Vec<f64>,
    pub y0_readout: Option<Vec<f64>>,
    /// Losses of the final networks on the evaluation paths.
    pub final_loss: f64,
    pub final_loss2: Option<f64>,
    /// Penalty on the last training batch, for comparison with `final_loss2`.
    pub last_batch_loss2: Option<f64>,
    pub mean_v_norm: f64,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: usize,
    pub seed: u64,
    pub kind: String,
    pub message: String,
}

/// Spread of the last history row across runs, the value a plot of the
/// training curves ends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalIteration {
    pub iteration: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub variance_definition: String,
    /// Aggregate of the evaluated `y_0` first components; absent when
    /// every run failed.
    pub aggregate: Option<AggregateReport>,
    /// Absent when training recorded no iterations.
    pub final_iteration: Option<FinalIteration>,
    pub runs: Vec<RunSummary>,
    pub failures: Vec<RunFailure>,
}

/// Result of [`run_experiment`]; `reports` is indexed by run.
#[derive(Debug)]
pub struct ExperimentReport {
    pub summary: Summary,
    pub reports: Vec<Option<RunReport>>,
}

impl ExperimentReport {
    pub fn succeeded(&self) -> bool {
        self.summary.failures.is_empty()
    }
}

fn run_dir(out: &Path, run: usize) -> PathBuf {
    out.join(format!("run_{run:03}"))
}

/// Formats `history.csv`.
pub fn history_csv(algorithm: Algorithm, history: &[IterationRecord]) -> String {
    let mut s = match algorithm {
        Algorithm::Alg1 => String::from("iteration,loss,lr,y0_first,elapsed_s\n"),
        Algorithm::Alg2 => String::from("iteration,loss1,loss2,lr,y0_first,elapsed_s\n"),
    };
    for r in history {
        let _ = write!(s, "{},{}", r.iteration, r.loss);
        if algorithm == Algorithm::Alg2 {
            let _ = write!(s, ",{}", r.loss2.unwrap_or(f64::NAN));
        }
        let _ = writeln!(s, ",{},{},{}", r.lr, r.y0_first, r.elapsed_s);
    }
    s
}

fn runs_csv(algorithm: Algorithm, runs: &[RunSummary]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = match algorithm {
        Algorithm::Alg1 => String::from("run,seed,y0_first,final_loss\n"),
        Algorithm::Alg2 => String::from("run,seed,y0_first,final_loss,final_loss2\n"),
    };
    for r in runs {
        let _ = write!(s, "{},{},{},{}", r.run, r.seed, r.y0[0], r.final_loss);
        if algorithm == Algorithm::Alg2 {
            let _ = write!(s, ",{}", opt(r.final_loss2));
        }
        s.push('\n');
    }
    s
}

fn train_one(config: &ExperimentConfig, seed: u64) -> Result<RunReport> {
    let problem = build_problem(
        config.problem,
        config.n,
        config.lambda,
        config.horizon,
        config.initial_state.clone(),
    )?;
    let alt = config.alt_train_config(seed)?;
    match config.algorithm {
        Algorithm::Alg1 => alg1::train_alg1(problem.as_ref(), &alt.train),
        Algorithm::Alg2 => alg2::train_alg2(problem.as_ref(), &alt),
    }
}

/// Trains `config.runs` networks and writes the batch to `config.out`.
///
/// A run that aborts is recorded in `summary.json` and its `error.json`;
/// the other runs continue. Only configuration and I/O problems return
/// `Err`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let benchmark = config.benchmark()?;
    let out = &config.out;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(config)?)?;

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunReport>>>> =
        Mutex::new((0..config.runs).map(|_| None).collect());
    let io_error: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..config.jobs.min(config.runs) {
            scope.spawn(|| loop {
                let run = next.fetch_add(1, Ordering::Relaxed);
                if run >= config.runs {
                    break;
                }
                let result = train_one(config, config.seed(run));
                if let Err(e) = write_run_files(config, run, &result) {
                    io_error.lock().unwrap().get_or_insert(e);
                }
                slots.lock().unwrap()[run] = Some(result);
            });
        }
    });
    if let Some(e) = io_error.into_inner().unwrap() {
        return Err(e);
    }

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut reports = Vec::new();
    for (run, slot) in slots.into_inner().unwrap().into_iter().enumerate() {
        let seed = config.seed(run);
        match slot.expect("every run is claimed") {
            Ok(report) => {
                runs.push(RunSummary {
                    run,
                    seed,
                    y0: report.estimate.y0.clone(),
                    y0_std_err: report.estimate.std_err.clone(),
                    y0_readout: report.y0_readout.clone(),
                    final_loss: report.final_loss,
                    final_loss2: report.final_loss2,
                    last_batch_loss2: report.history.last().and_then(|r| r.loss2),
                    mean_v_norm: report.estimate.mean_v_norm,
                    elapsed_s: report.elapsed_s,
                });
                reports.push(Some(report));
            }
            Err(e) => {
                failures.push(RunFailure {
                    run,
                    seed,
                    kind: e.kind().to_string(),
                    message: e.to_string(),
                });
                reports.push(None);
            }
        }
    }

    let firsts: Vec<f64> = runs.iter().map(|r| r.y0[0]).collect();
    let aggregate = match aggregate(&firsts, benchmark) {
        Ok(a) => Some(a),
        Err(Error::EmptyAggregate) => None,
        Err(e) => return Err(e),
    };
    let lasts: Vec<&IterationRecord> = reports
        .iter()
        .flatten()
        .filter_map(|r| r.history.last())
        .collect();
    let final_iteration = match lasts.first() {
        Some(first) => {
            let values: Vec<f64> = lasts.iter().map(|r| r.y0_first).collect();
            let a = self::aggregate(&values, None)?;
            Some(FinalIteration {
                iteration: first.iteration,
                mean: a.mean,
                variance: a.variance,
            })
        }
        None => None,
    };

    let summary = Summary {
        config_hash: config.hash(),
        config: config.clone(),
        variance_definition: VARIANCE_DEFINITION.to_string(),
        aggregate,
        final_iteration,
        runs,
        failures,
    };
    fs::write(out.join("runs.csv"), runs_csv(config.algorithm, &summary.runs))?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(ExperimentReport { summary, reports })
}

fn write_run_files(config: &ExperimentConfig, run: usize, result: &Result<RunReport>) -> Result<()> {
    let dir = run_dir(&config.out, run);
    fs::create_dir_all(&dir)?;
    let error_path = dir.join("error.json");
    match result {
        Ok(report) => {
            fs::write(dir.join("history.csv"), history_csv(config.algorithm, &report.history))?;
            if error_path.exists() {
                fs::remove_file(error_path)?;
            }
        }
        Err(e) => {
            let body = serde_json::json!({
                "run": run,
                "seed": config.seed(run),
                "config_hash": config.hash(),
                "kind": e.kind(),
                "message": e.to_string(),
            });
            fs::write(error_path, serde_json::to_string_pretty(&body)?)?;
        }
    }
    Ok(())
}
