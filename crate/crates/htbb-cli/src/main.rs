//! `htbb` command line: approximate or minimize a benchmark function on a
//! Chebyshev grid under an evaluation budget, or run a whole batch of
//! experiments into a CSV table.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use htbb::bench::{chebyshev_grid, relative_l2_error, Benchmark, Oracle};
use htbb::sweep::{ht_cross, ht_opt, BudgetPolicy, Direction, RunReport, SweepConfig};
use htbb::tree::build_balanced_tree;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "htbb",
    about = "Black-box approximation and gradient-free optimization in the hierarchical Tucker format",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a low-rank surrogate of a benchmark and report its test error.
    Approx(RunArgs),
    /// Search for an extremal value of a benchmark on its grid.
    Opt(OptArgs),
    /// Run a matrix of experiments from a JSON config into a CSV table.
    Batch(BatchArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Benchmark name (lowercase, e.g. alpine, sphere, schwefel).
    #[arg(long)]
    function: String,
    /// Number of input variables.
    #[arg(long)]
    dim: usize,
    /// Grid nodes per variable.
    #[arg(long, default_value_t = 8)]
    grid: usize,
    /// Initial rank of every link.
    #[arg(long, default_value_t = 2)]
    rank: usize,
    /// Budget of distinct function evaluations.
    #[arg(long, default_value_t = 10_000)]
    budget: u64,
    /// Maximum rank growth per index update.
    #[arg(long, default_value_t = 1)]
    dr: usize,
    /// Relative rank-truncation threshold.
    #[arg(long, default_value_t = 1e-12)]
    eps: f64,
    /// Visit-count mean difference treated as a tie during the walk.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test-set size for the relative error estimate.
    #[arg(long, default_value_t = 10_000)]
    test: usize,
    /// Write the run report JSON here (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the convergence trace CSV here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the surrogate model JSON here (approx mode only).
    #[arg(long)]
    model: Option<PathBuf>,
    /// How the budget is enforced: strict caps the whole run, search-only
    /// caps the index search and lets core construction finish.
    #[arg(long, value_enum, default_value_t = PolicyArg::Strict)]
    budget_policy: PolicyArg,
}

#[derive(Args, Clone)]
struct OptArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, default_value_t = DirectionArg::Min)]
    direction: DirectionArg,
}

#[derive(Args)]
struct BatchArgs {
    /// JSON experiment matrix; see the README for the schema.
    #[arg(long)]
    config: PathBuf,
    /// Write the result CSV here (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum PolicyArg {
    Strict,
    SearchOnly,
}

impl From<PolicyArg> for BudgetPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Strict => BudgetPolicy::Strict,
            PolicyArg::SearchOnly => BudgetPolicy::SearchOnly,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum DirectionArg {
    Min,
    Max,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Min => Direction::Min,
            DirectionArg::Max => Direction::Max,
        }
    }
}

/// Flat machine-readable run summary.
#[derive(Debug, Serialize, Deserialize)]
struct CliReport {
    mode: String,
    function: String,
    dim: usize,
    grid: usize,
    rank: usize,
    budget: u64,
    seed: u64,
    evaluations: u64,
    best_value: f64,
    best_index: Vec<usize>,
    rel_error: Option<f64>,
    wall_seconds: f64,
}

struct RunOutput {
    report: CliReport,
    trace: RunReport,
    model_json: Option<String>,
}

fn execute(args: &RunArgs, mode: &str, direction: Direction) -> Result<RunOutput> {
    let bench = Benchmark::from_name(&args.function)
        .with_context(|| format!("benchmark `{}`", args.function))?;
    let start = Instant::now();
    let topo = build_balanced_tree(args.dim, &vec![args.grid; args.dim])?;
    let oracle = Oracle::for_benchmark(&args.function, args.dim, args.grid, args.budget)?;
    let config = SweepConfig {
        rank: args.rank,
        delta_r: args.dr,
        eps: args.eps,
        alpha: args.alpha,
        seed: args.seed,
        transform: match (mode, direction) {
            ("approx", _) => htbb::transform::TransformKind::Identity,
            (_, Direction::Min) => htbb::transform::TransformKind::ExpMin,
            (_, Direction::Max) => htbb::transform::TransformKind::ExpMax,
        },
        budget_policy: args.budget_policy.into(),
    };

    let (run_report, rel_error, model_json) = if mode == "approx" {
        let (model, report) = ht_cross(&topo, &oracle, &config)?;
        let (a, b) = bench.bounds();
        let axis = chebyshev_grid(args.grid, a, b)?;
        let sizes = vec![args.grid; args.dim];
        let truth = move |ix: &[usize]| {
            let x: Vec<f64> = ix.iter().map(|&i| axis[i]).collect();
            bench.eval(&x)
        };
        let err = relative_l2_error(
            |ix| model.evaluate(ix).expect("surrogate evaluates on its grid"),
            truth,
            &sizes,
            args.test,
            args.seed.wrapping_add(1),
        );
        let model_json = if args.model.is_some() {
            Some(model.to_json()?)
        } else {
            None
        };
        (report, Some(err.value), model_json)
    } else {
        let report = ht_opt(&topo, &oracle, &config, direction)?;
        (report, None, None)
    };

    let report = CliReport {
        mode: mode.to_string(),
        function: args.function.clone(),
        dim: args.dim,
        grid: args.grid,
        rank: args.rank,
        budget: args.budget,
        seed: args.seed,
        evaluations: run_report.total_evaluations,
        best_value: run_report.best_value,
        best_index: run_report.best_index.clone(),
        rel_error,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        report,
        trace: run_report,
        model_json,
    })
}

fn emit(args: &RunArgs, output: RunOutput) -> Result<()> {
    let json = serde_json::to_string_pretty(&output.report)?;
    match &args.out {
        Some(path) => std::fs::write(path, json.as_bytes())
            .with_context(|| format!("writing {}", path.display()))?,
        None => println!("{json}"),
    }
    if let Some(path) = &args.trace {
        std::fs::write(path, output.trace.trace_csv())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let (Some(path), Some(model)) = (&args.model, &output.model_json) {
        std::fs::write(path, model.as_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// One cell of a batch experiment matrix.
#[derive(Debug, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
struct BatchConfig {
    mode: String,
    functions: Vec<String>,
    dims: Vec<usize>,
    #[serde(default = "default_repeats")]
    repeats: usize,
    #[serde(default = "default_grid")]
    grid: usize,
    #[serde(default = "default_rank")]
    rank: usize,
    #[serde(default = "default_budget")]
    budget: u64,
    #[serde(default = "default_dr")]
    dr: usize,
    #[serde(default = "default_eps")]
    eps: f64,
    #[serde(default = "default_alpha")]
    alpha: f64,
    #[serde(default)]
    seed0: u64,
    #[serde(default = "default_test")]
    test: usize,
    #[serde(default)]
    budget_policy: Option<String>,
    #[serde(default)]
    direction: Option<String>,
}

fn default_repeats() -> usize {
    10
}
fn default_grid() -> usize {
    8
}
fn default_rank() -> usize {
    2
}
fn default_budget() -> u64 {
    10_000
}
fn default_dr() -> usize {
    1
}
fn default_eps() -> f64 {
    1e-12
}
fn default_alpha() -> f64 {
    0.5
}
fn default_test() -> usize {
    10_000
}

fn run_batch(args: &BatchArgs) -> Result<String> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| UsageError(format!("reading {}: {e}", args.config.display())))?;
    let config: BatchConfig = serde_json::from_str(&text)
        .map_err(|e| UsageError(format!("parsing batch config: {e}")))?;
    if config.mode != "approx" && config.mode != "opt" {
        bail!(UsageError(format!(
            "batch mode must be `approx` or `opt`, got `{}`",
            config.mode
        )));
    }
    let policy = match config.budget_policy.as_deref() {
        None | Some("strict") => PolicyArg::Strict,
        Some("search-only") => PolicyArg::SearchOnly,
        Some(other) => bail!(UsageError(format!("unknown budget policy `{other}`"))),
    };
    let direction = match config.direction.as_deref() {
        None | Some("min") => Direction::Min,
        Some("max") => Direction::Max,
        Some(other) => bail!(UsageError(format!("unknown direction `{other}`"))),
    };
    for f in &config.functions {
        if Benchmark::from_name(f).is_err() {
            bail!(UsageError(format!("unknown benchmark `{f}` in config")));
        }
    }

    // One cell per (function, dim); repeats vary only the seed.
    let cells: Vec<(String, usize)> = config
        .functions
        .iter()
        .flat_map(|f| config.dims.iter().map(move |&d| (f.clone(), d)))
        .collect();
    let rows: Result<Vec<String>> = cells
        .par_iter()
        .map(|(function, dim)| {
            let mut values = Vec::with_capacity(config.repeats);
            for rep in 0..config.repeats {
                let run_args = RunArgs {
                    function: function.clone(),
                    dim: *dim,
                    grid: config.grid,
                    rank: config.rank,
                    budget: config.budget,
                    dr: config.dr,
                    eps: config.eps,
                    alpha: config.alpha,
                    seed: config.seed0 + rep as u64,
                    test: config.test,
                    out: None,
                    trace: None,
                    model: None,
                    budget_policy: policy,
                };
                let output = execute(&run_args, &config.mode, direction)?;
                let value = match config.mode.as_str() {
                    "approx" => output.report.rel_error.expect("approx reports an error"),
                    _ => output.report.best_value,
                };
                values.push(value);
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = if values.len() > 1 {
                (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Ok(format!(
                "{function},{dim},{mean:.16e},{std:.16e},{}",
                values.len()
            ))
        })
        .collect();
    let mut csv = String::from("function,dim,mean,std,runs\n");
    for row in rows? {
        csv.push_str(&row);
        csv.push('\n');
    }
    Ok(csv)
}

fn main() {
    let cli = Cli::parse();
    let result: Result<()> = match &cli.command {
        Command::Approx(args) => match validate_and_execute(args, "approx", Direction::Min) {
            Ok(out) => emit(args, out),
            Err(e) => Err(e),
        },
        Command::Opt(opt) => match validate_and_execute(&opt.run, "opt", opt.direction.into()) {
            Ok(out) => emit(&opt.run, out),
            Err(e) => Err(e),
        },
        Command::Batch(args) => run_batch(args).and_then(|csv| match &args.out {
            Some(path) => std::fs::write(path, csv.as_bytes())
                .with_context(|| format!("writing {}", path.display())),
            None => {
                print!("{csv}");
                Ok(())
            }
        }),
    };
    if let Err(e) = result {
        // Bad user inputs are usage errors (2); anything else is a runtime
        // failure (1).
        let usage = e.downcast_ref::<UsageError>().is_some();
        eprintln!("error: {e:#}");
        std::process::exit(if usage { 2 } else { 1 });
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn validate_and_execute(args: &RunArgs, mode: &str, direction: Direction) -> Result<RunOutput> {
    if Benchmark::from_name(&args.function).is_err() {
        bail!(UsageError(format!(
            "unknown benchmark `{}`; expected one of the registry names",
            args.function
        )));
    }
    if args.dim < 2 {
        bail!(UsageError("--dim must be at least 2".into()));
    }
    if args.grid < 2 {
        bail!(UsageError("--grid must be at least 2".into()));
    }
    if args.budget == 0 {
        bail!(UsageError("--budget must be positive".into()));
    }
    if args.rank == 0 {
        bail!(UsageError("--rank must be at least 1".into()));
    }
    execute(args, mode, direction)
}
