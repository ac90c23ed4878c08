use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hamiltonian_control::experiment::{run_experiment, ExperimentConfig};
use hamiltonian_control::problems::ProblemKind;
use hamiltonian_control::riccati::benchmark_y0;
use hamiltonian_control::solver::Algorithm;
use hamiltonian_control::Error;
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "hamctl", version, about = "Train stochastic-control solvers and compare against benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a batch of seeded runs and write CSV/JSON artifacts.
    Run(RunArgs),
    /// Print Riccati benchmark values of y0 (first component) as CSV.
    Benchmark {
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Comma-separated coupling values.
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1")]
        lambda: Vec<f64>,
        #[arg(long, default_value_t = 0.1)]
        horizon: f64,
        /// Initial value repeated in every component.
        #[arg(long, default_value_t = 1.0)]
        a: f64,
    },
}

/// Flags override the values read from `--config`.
#[derive(Debug, clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// example1, example2 or example3.
    #[arg(long)]
    problem: Option<String>,
    /// alg1 or alg2.
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    runs: Option<usize>,
    /// Seed of the first run.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    maxstep: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = &self.problem {
            c.problem = p.parse::<ProblemKind>()?;
        }
        if let Some(a) = &self.algorithm {
            c.algorithm = a.parse::<Algorithm>()?;
        }
        c.n = self.n.unwrap_or(c.n);
        c.lambda = self.lambda.unwrap_or(c.lambda);
        c.runs = self.runs.unwrap_or(c.runs);
        c.base_seed = self.seed.unwrap_or(c.base_seed);
        c.maxstep = self.maxstep.unwrap_or(c.maxstep);
        c.jobs = self.jobs.unwrap_or(c.jobs);
        if let Some(out) = &self.out {
            c.out = out.clone();
        }
        Ok(c)
    }
}

fn fail(kind: &str, message: String, extra: serde_json::Value) -> ExitCode {
    let mut body = json!({ "error": { "kind": kind, "message": message } });
    if let (Some(obj), serde_json::Value::Object(more)) = (body["error"].as_object_mut(), extra) {
        obj.extend(more);
    }
    eprintln!("{body}");
    ExitCode::FAILURE
}

fn run(args: RunArgs) -> Result<ExitCode, Error> {
    let config = args.config()?;
    let report = run_experiment(&config)?;
    let s = &report.summary;
    println!("out: {}", config.out.display());
    println!("config_hash: {}", s.config_hash);
    println!("completed runs: {}/{}", s.runs.len(), config.runs);
    if let Some(a) = &s.aggregate {
        println!("mean y0_first: {}", a.mean);
        println!("variance: {:e}", a.variance);
        if let (Some(b), Some(r)) = (a.benchmark, a.relative_error) {
            println!("benchmark: {b}");
            println!("relative error: {r:e}");
        }
    }
    if report.succeeded() {
        return Ok(ExitCode::SUCCESS);
    }
    Ok(fail(
        "run_failed",
        format!("{} of {} runs aborted", s.failures.len(), config.runs),
        json!({ "failures": s.failures }),
    ))
}

fn benchmark(n: usize, lambdas: &[f64], horizon: f64, a: f64) -> Result<ExitCode, Error> {
    let mut out = String::from("lambda,y0_first\n");
    for &lambda in lambdas {
        let y = benchmark_y0(n, lambda, &vec![a; n], horizon)?;
        out.push_str(&format!("{lambda},{}\n", y[0]));
    }
    print!("{out}");
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string().trim_end().to_string(), json!({})),
    };
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Benchmark { n, lambda, horizon, a } => benchmark(n, &lambda, horizon, a),
    };
    result.unwrap_or_else(|e| {
        let field = match &e {
            Error::InvalidConfig { field, .. } => json!({ "field": field }),
            _ => json!({}),
        };
        fail(e.kind(), e.to_string(), field)
    })
}
