//! Command-line front end: instance generation, the three solvers, verification
//! and benchmarking.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use nsw_core::generate::{generate, GeneratorConfig};
use nsw_core::instance::{validate, InstanceDoc};
use nsw_core::io::{load_instance, load_json, to_json_string};
use nsw_core::market::{scaling_algorithm, verify_equilibrium, MarketOutcome, ScalingOptions};
use nsw_core::oracle::{solve_exact, DEFAULT_LIMIT};
use nsw_core::pipeline::{bench, run_pipeline, BenchConfig, GridCell, Pipeline, PipelineOptions, Report};
use nsw_core::stable::{estimate_expected_welfare, solve_relaxation, RelaxationSolution, DEFAULT_MAX_ITER, DEFAULT_TOL};
use nsw_core::{nsw, Allocation, Instance, NswError};

const THREADS_VAR: &str = "NSW_SPLC_THREADS";

#[derive(Parser)]
#[command(name = "nsw-splc", version, about = "Nash social welfare for separable piecewise-linear concave utilities")]
struct Cli {
    /// Encoding of reports.
    #[arg(long, value_enum, default_value_t = Format::Json, global = true)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random instance.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        agents: usize,
        #[arg(long, default_value_t = 3)]
        types: usize,
        #[arg(long, default_value_t = 1)]
        min_supply: usize,
        #[arg(long, default_value_t = 3)]
        max_supply: usize,
        #[command(flatten)]
        out: Output,
    },
    /// Check an instance file and list every violated invariant.
    Validate { instance: PathBuf },
    /// Exact optimum by enumeration.
    SolveExact {
        instance: PathBuf,
        #[arg(long, default_value_t = DEFAULT_LIMIT)]
        limit: f64,
    },
    /// Spending-restricted equilibrium by the scaling algorithm.
    MarketEq {
        instance: PathBuf,
        #[arg(long)]
        phases: Option<usize>,
        /// Write one JSON object per price-increase iteration to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        out: Output,
    },
    /// Equilibrium followed by forest rounding.
    MarketRound {
        instance: PathBuf,
        #[arg(long)]
        phases: Option<usize>,
    },
    /// Solve the polynomial relaxation.
    StableRelax {
        instance: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
        max_iter: usize,
        #[command(flatten)]
        out: Output,
    },
    /// Randomized rounding of a fractional allocation.
    StableRound {
        instance: PathBuf,
        /// Allocation, or relaxation solution, to round.
        #[arg(long)]
        x: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check an equilibrium written by `market-eq`.
    Verify {
        instance: PathBuf,
        #[arg(long)]
        equilibrium: PathBuf,
        /// Tolerance; defaults to the one recorded with the equilibrium.
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Run every pipeline on generated instances and write a CSV table.
    Bench {
        #[arg(long, default_value_t = 5)]
        count: usize,
        /// Comma-separated grid cells `AGENTSxTYPESxMAX_SUPPLY`.
        #[arg(long, value_delimiter = ',', default_value = "2x2x2,3x3x2,4x4x3")]
        grid: Vec<GridCell>,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[command(flatten)]
        out: Output,
    },
    /// Run one pipeline end to end and print its report.
    Run {
        instance: PathBuf,
        #[arg(long)]
        pipeline: Pipeline,
        #[command(flatten)]
        options: PipelineArgs,
    },
}

#[derive(Args)]
struct Output {
    /// Write to this file instead of standard output.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Seed of every random choice (instance generation in `bench`, sampling).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = DEFAULT_LIMIT)]
    limit: f64,
    #[arg(long)]
    phases: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
}

impl PipelineArgs {
    fn options(&self) -> PipelineOptions {
        PipelineOptions {
            exact_limit: self.limit,
            phases: self.phases,
            relax_tol: self.tol,
            relax_max_iter: self.max_iter,
            trials: self.trials,
            seed: self.seed,
        }
    }
}

/// Outcome of a command that ran but found a problem with its input.
enum Failure {
    Error(NswError),
    /// Already reported; exit with status 1.
    Reported,
}

impl From<NswError> for Failure {
    fn from(e: NswError) -> Self {
        Failure::Error(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Error(e.into())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn writer(out: &Output) -> io::Result<Box<dyn Write>> {
    Ok(match &out.output {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn emit_json<T: Serialize>(out: &Output, value: &T) -> CmdResult {
    let mut w = writer(out)?;
    w.write_all(to_json_string(value)?.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn stdout() -> Output {
    Output { output: None }
}

fn emit_report(format: Format, report: &Report) -> CmdResult {
    match format {
        Format::Json => emit_json(&stdout(), report),
        Format::Csv => {
            let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
            let mut w = csv::Writer::from_writer(io::stdout().lock());
            w.write_record([
                "instance", "pipeline", "product", "geometric_mean", "bound_kind", "bound", "optimum", "ratio",
                "expected_product", "std_error", "wall_time_ms", "seed",
            ])
            .map_err(NswError::from)?;
            w.write_record([
                report.instance.clone(),
                report.pipeline.to_string(),
                report.product.to_string(),
                report.geometric_mean.to_string(),
                report.bound_kind.name().to_string(),
                report.bound.to_string(),
                opt(report.optimum),
                opt(report.ratio),
                opt(report.expected_product),
                opt(report.std_error),
                report.wall_time_ms.to_string(),
                report.seed.to_string(),
            ])
            .map_err(NswError::from)?;
            w.flush()?;
            Ok(())
        }
    }
}

fn instance_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Reads either a bare allocation or a relaxation solution.
fn load_fractional(path: &Path, inst: &Instance) -> Result<Allocation, NswError> {
    let x = match load_json::<Allocation>(path) {
        Ok(x) => x,
        Err(_) => load_json::<RelaxationSolution>(path)?.x,
    };
    x.check_feasible(inst)?;
    Ok(x)
}

#[derive(Serialize)]
struct ExactOutput {
    product: f64,
    geometric_mean: f64,
    log_product: f64,
    counts: Vec<Vec<usize>>,
    allocation: Allocation,
}

#[derive(Serialize)]
struct RoundOutput {
    mean_product: f64,
    std_error: f64,
    trials: usize,
    seed: u64,
    best_product: f64,
    best_allocation: Allocation,
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Gen { seed, agents, types, min_supply, max_supply, out } => {
            let inst = generate(&GeneratorConfig::new(seed, agents, types, (min_supply, max_supply)))?;
            emit_json(&out, &inst)
        }
        Command::Validate { instance } => {
            let doc: InstanceDoc = load_json(&instance)?;
            match validate(&doc) {
                Ok(()) => {
                    println!("{}", serde_json::json!({ "valid": true }));
                    Ok(())
                }
                Err(v) => {
                    println!("{}", serde_json::json!({ "valid": false, "violations": v }));
                    Err(Failure::Reported)
                }
            }
        }
        Command::SolveExact { instance, limit } => {
            let inst = load_instance(&instance)?;
            let sol = solve_exact(&inst, limit)?;
            emit_json(
                &stdout(),
                &ExactOutput {
                    product: sol.value.product,
                    geometric_mean: sol.value.geometric_mean,
                    log_product: sol.value.log_product,
                    counts: sol.counts,
                    allocation: sol.allocation,
                },
            )
        }
        Command::MarketEq { instance, phases, trace, out } => {
            let inst = load_instance(&instance)?;
            let mut outcome = scaling_algorithm(&inst, &ScalingOptions { phases, trace: trace.is_some() })?;
            if let Some(path) = trace {
                let mut w = BufWriter::new(File::create(path)?);
                for rec in &outcome.trace {
                    serde_json::to_writer(&mut w, rec).map_err(NswError::from)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
                outcome.trace.clear();
            }
            emit_json(&out, &outcome)
        }
        Command::MarketRound { instance, phases } => {
            let inst = load_instance(&instance)?;
            let opts = PipelineOptions { phases, ..Default::default() };
            emit_report(cli.format, &run_pipeline(&inst, &instance_id(&instance), Pipeline::Market, &opts)?)
        }
        Command::StableRelax { instance, tol, max_iter, out } => {
            let inst = load_instance(&instance)?;
            emit_json(&out, &solve_relaxation(&inst, tol, max_iter)?)
        }
        Command::StableRound { instance, x, trials, seed } => {
            let inst = load_instance(&instance)?;
            let x = load_fractional(&x, &inst)?;
            let e = estimate_expected_welfare(&inst, &x, trials, seed)?;
            emit_json(
                &stdout(),
                &RoundOutput {
                    mean_product: e.mean,
                    std_error: e.std_error,
                    trials,
                    seed,
                    best_product: nsw(&inst, &e.best)?.product,
                    best_allocation: e.best,
                },
            )
        }
        Command::Verify { instance, equilibrium, eps } => {
            let inst = load_instance(&instance)?;
            let eq: MarketOutcome = load_json(&equilibrium)?;
            let eps = eps.unwrap_or(eq.eps_eq);
            match verify_equilibrium(&inst, &eq.prices, &eq.allocation, &eq.bang_per_buck, &eq.spending, eps) {
                Ok(()) => {
                    println!("{}", serde_json::json!({ "equilibrium": true, "eps": eps }));
                    Ok(())
                }
                Err(v) => {
                    println!("{}", serde_json::json!({ "equilibrium": false, "eps": eps, "violations": v }));
                    Err(Failure::Reported)
                }
            }
        }
        Command::Bench { count, grid, pipeline, out } => {
            let cfg = BenchConfig { seed: pipeline.seed, count, grid, options: pipeline.options() };
            let mut w = writer(&out)?;
            bench(&cfg, &mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::Run { instance, pipeline, options } => {
            let inst = load_instance(&instance)?;
            emit_report(cli.format, &run_pipeline(&inst, &instance_id(&instance), pipeline, &options.options())?)
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| format!("{THREADS_VAR} must be a positive integer, got `{v}`"))?;
    if n == 0 {
        return Err(format!("{THREADS_VAR} must be a positive integer, got `{v}`"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("{}", serde_json::json!({ "error": { "kind": "usage", "message": msg } }));
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Reported) => ExitCode::from(1),
        Err(Failure::Error(e)) => {
            eprintln!("{}", serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
