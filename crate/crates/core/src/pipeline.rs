//! End-to-end pipelines and benchmark reports.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NswError, Result};
use crate::generate::{generate, GeneratorConfig};
use crate::instance::{nsw, Allocation, Instance};
use crate::market::{scaling_algorithm, MarketOutcome, ScalingOptions};
use crate::oracle::{search_space, solve_exact, DEFAULT_LIMIT};
use crate::rounding::{break_cycles, build_spending_graph, normalize, round, upper_bound, RoundingResult, UpperBound};
use crate::stable::{estimate_expected_welfare, solve_relaxation, RelaxationSolution, WelfareEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Exact,
    Market,
    Stable,
}

impl Pipeline {
    pub const ALL: [Pipeline; 3] = [Pipeline::Exact, Pipeline::Market, Pipeline::Stable];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Exact => "exact",
            Pipeline::Market => "market",
            Pipeline::Stable => "stable",
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pipeline {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Pipeline::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown pipeline `{s}` (expected exact, market or stable)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    /// Search-space limit of the exact oracle.
    pub exact_limit: f64,
    /// Scaling phases of the market algorithm (default when `None`).
    pub phases: Option<usize>,
    pub relax_tol: f64,
    pub relax_max_iter: usize,
    /// Sampling trials of the stable pipeline.
    pub trials: usize,
    pub seed: u64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            exact_limit: DEFAULT_LIMIT,
            phases: None,
            relax_tol: crate::stable::DEFAULT_TOL,
            relax_max_iter: crate::stable::DEFAULT_MAX_ITER,
            trials: 1000,
            seed: 0,
        }
    }
}

/// Which quantity the `bound` field of a [`Report`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    /// The exact optimum.
    Optimum,
    /// The equilibrium price bound, rescaled to the original valuations.
    UpperBound,
    /// `exp` of the relaxation value.
    Relaxation,
}

impl BoundKind {
    pub fn name(self) -> &'static str {
        match self {
            BoundKind::Optimum => "optimum",
            BoundKind::UpperBound => "upper_bound",
            BoundKind::Relaxation => "relaxation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub instance: String,
    pub pipeline: Pipeline,
    pub product: f64,
    pub log_product: f64,
    pub geometric_mean: f64,
    pub bound_kind: BoundKind,
    /// Bound on the optimal product, in product form.
    pub bound: f64,
    /// Optimal product when the oracle could solve the instance.
    pub optimum: Option<f64>,
    /// Geometric mean of the result over that of the optimum.
    pub ratio: Option<f64>,
    /// Mean sampled product and its standard error (stable pipeline only).
    pub expected_product: Option<f64>,
    pub std_error: Option<f64>,
    pub allocation: Allocation,
    pub wall_time_ms: f64,
    pub seed: u64,
    pub parameters: PipelineOptions,
}

/// Equilibrium, normalized instance and rounding of the market pipeline.
#[derive(Debug, Clone)]
pub struct MarketRound {
    pub outcome: MarketOutcome,
    pub normalized: Instance,
    pub bound: UpperBound,
    pub rounding: RoundingResult,
}

/// Runs the scaling algorithm and rounds its equilibrium.
pub fn market_round(inst: &Instance, phases: Option<usize>) -> Result<MarketRound> {
    let outcome = scaling_algorithm(inst, &ScalingOptions { phases, trace: false })?;
    let normalized = normalize(inst, &outcome.bang_per_buck)?;
    let graph = build_spending_graph(inst, &outcome.prices, &outcome.allocation, &outcome.spending)?;
    let rounding = round(&normalized, &outcome.prices, &break_cycles(&graph))?;
    let bound = upper_bound(&outcome.prices, inst.supplies());
    Ok(MarketRound { outcome, normalized, bound, rounding })
}

/// Relaxation and sampled rounding of the stable pipeline.
#[derive(Debug, Clone)]
pub struct StableRound {
    pub relaxation: RelaxationSolution,
    pub estimate: WelfareEstimate,
}

pub fn stable_round(inst: &Instance, opts: &PipelineOptions) -> Result<StableRound> {
    let relaxation = solve_relaxation(inst, opts.relax_tol, opts.relax_max_iter)?;
    let estimate = estimate_expected_welfare(inst, &relaxation.x, opts.trials.max(1), opts.seed)?;
    Ok(StableRound { relaxation, estimate })
}

fn optimum(inst: &Instance, limit: f64) -> Result<Option<f64>> {
    if search_space(inst) > limit {
        return Ok(None);
    }
    Ok(Some(solve_exact(inst, limit)?.value.product))
}

fn ratio(inst: &Instance, gm: f64, opt: Option<f64>) -> Option<f64> {
    let opt_gm = opt?.powf(1.0 / inst.n() as f64);
    Some(if opt_gm > 0.0 { gm / opt_gm } else { 1.0 })
}

/// Executes `pipeline` on `inst` end to end.
pub fn run_pipeline(inst: &Instance, id: &str, pipeline: Pipeline, opts: &PipelineOptions) -> Result<Report> {
    let start = Instant::now();
    let (allocation, bound_kind, bound, opt, expected) = match pipeline {
        Pipeline::Exact => {
            let sol = solve_exact(inst, opts.exact_limit)?;
            let p = sol.value.product;
            (sol.allocation, BoundKind::Optimum, p, Some(p), None)
        }
        Pipeline::Market => {
            let m = market_round(inst, opts.phases)?;
            let scale: f64 = m.outcome.bang_per_buck.iter().map(|b| b.ln()).sum();
            let bound = (m.bound.log + scale).exp();
            (m.rounding.allocation, BoundKind::UpperBound, bound, optimum(inst, opts.exact_limit)?, None)
        }
        Pipeline::Stable => {
            let s = stable_round(inst, opts)?;
            let e = (s.estimate.mean, s.estimate.std_error);
            (s.estimate.best, BoundKind::Relaxation, s.relaxation.value.exp(), optimum(inst, opts.exact_limit)?, Some(e))
        }
    };
    let value = nsw(inst, &allocation)?;
    Ok(Report {
        instance: id.to_string(),
        pipeline,
        product: value.product,
        log_product: value.log_product,
        geometric_mean: value.geometric_mean,
        bound_kind,
        bound,
        optimum: opt,
        ratio: ratio(inst, value.geometric_mean, opt),
        expected_product: expected.map(|e| e.0),
        std_error: expected.map(|e| e.1),
        allocation,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        seed: opts.seed,
        parameters: opts.clone(),
    })
}

/// One grid cell of a benchmark: agents, types and the largest supply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub agents: usize,
    pub types: usize,
    pub max_supply: usize,
}

impl FromStr for GridCell {
    type Err = String;

    /// Parses `NxMxK`, e.g. `3x2x2`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split('x').collect();
        let nums: Vec<usize> = parts.iter().filter_map(|p| p.trim().parse().ok()).collect();
        match nums[..] {
            [agents, types, max_supply] if nums.len() == parts.len() && agents > 0 && types > 0 && max_supply > 0 => {
                Ok(GridCell { agents, types, max_supply })
            }
            _ => Err(format!("grid cell `{s}` is not of the form NxMxK with positive entries")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub seed: u64,
    /// Instances per grid cell.
    pub count: usize,
    pub grid: Vec<GridCell>,
    pub options: PipelineOptions,
}

/// Version of the benchmark CSV layout; bump when [`BENCH_COLUMNS`] changes.
pub const BENCH_VERSION: u32 = 1;

/// Columns of the benchmark CSV, in order.
pub const BENCH_COLUMNS: [&str; 14] = [
    "version",
    "cell",
    "instance",
    "seed",
    "agents",
    "types",
    "items",
    "pipeline",
    "status",
    "product",
    "geometric_mean",
    "bound",
    "ratio",
    "error",
];

fn instance_seed(seed: u64, cell: usize, index: usize) -> u64 {
    let mix = (cell as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    seed ^ mix
}

fn bench_rows(cfg: &BenchConfig, cell_index: usize, cell: GridCell, index: usize) -> Vec<Vec<String>> {
    let seed = instance_seed(cfg.seed, cell_index, index);
    let label = format!("{}x{}x{}", cell.agents, cell.types, cell.max_supply);
    let id = format!("{label}-{index}");
    let common = |items: String| vec![BENCH_VERSION.to_string(), label.clone(), id.clone(), seed.to_string(), cell.agents.to_string(), cell.types.to_string(), items];
    let inst = match generate(&GeneratorConfig::new(seed, cell.agents, cell.types, (1, cell.max_supply))) {
        Ok(inst) => inst,
        Err(e) => {
            let mut row = common(String::new());
            row.extend(["generate".into(), "error".into(), String::new(), String::new(), String::new(), String::new(), e.to_string()]);
            return vec![row];
        }
    };
    let opts = PipelineOptions { seed, ..cfg.options.clone() };
    let solvable = search_space(&inst) <= opts.exact_limit;
    Pipeline::ALL
        .into_iter()
        .map(|pipeline| {
            let mut row = common(inst.total_items().to_string());
            row.push(pipeline.to_string());
            if pipeline == Pipeline::Exact && !solvable {
                row.extend(["skipped".into(), String::new(), String::new(), String::new(), String::new(), "search space exceeds limit".into()]);
                return row;
            }
            match run_pipeline(&inst, &id, pipeline, &opts) {
                Ok(r) => row.extend([
                    "ok".into(),
                    r.product.to_string(),
                    r.geometric_mean.to_string(),
                    r.bound.to_string(),
                    r.ratio.map_or(String::new(), |v| v.to_string()),
                    String::new(),
                ]),
                Err(e) => row.extend(["error".into(), String::new(), String::new(), String::new(), String::new(), e.to_string()]),
            }
            row
        })
        .collect()
}

/// Runs every pipeline on `count` generated instances per grid cell and writes
/// one CSV row per (instance, pipeline). Wall times are left out so the output
/// depends only on the configuration.
pub fn bench(cfg: &BenchConfig, out: impl Write) -> Result<()> {
    let jobs: Vec<(usize, GridCell, usize)> = cfg
        .grid
        .iter()
        .enumerate()
        .flat_map(|(c, &cell)| (0..cfg.count).map(move |j| (c, cell, j)))
        .collect();
    let rows: Vec<Vec<Vec<String>>> = jobs.par_iter().map(|&(c, cell, j)| bench_rows(cfg, c, cell, j)).collect();
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(BENCH_COLUMNS)?;
    for row in rows.iter().flatten() {
        w.write_record(row)?;
    }
    w.flush().map_err(NswError::from)?;
    Ok(())
}
