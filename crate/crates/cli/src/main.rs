//! `sot-bench`: run simulated-time surrogate-optimization benchmarks and
//! compute relative speedups from their traces.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use sot_core::design::DesignKind;
use sot_core::error::Error;
use sot_core::harness::{
    compute_speedup, read_traces_json, run_experiment, write_report_csv, write_report_json,
    write_traces_csv, write_traces_json, EmitFormat, ExperimentSpec,
};
use sot_core::problem::lookup;
use sot_core::strategy::{Mode, SamplerKind};

#[derive(Parser)]
#[command(name = "sot-bench", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a multi-trial benchmark and write progress traces.
    Run(RunArgs),
    /// Compute relative speedups from previously written trace files.
    Speedup(SpeedupArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Objective name (sphere, ackley, rastrigin, griewank, levy, schaffer)
    #[arg(long)]
    problem: String,
    #[arg(long)]
    dim: usize,
    /// Execution mode: serial, sync, or async
    #[arg(long, default_value = "serial")]
    mode: String,
    /// Worker count for sync/async modes
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Pareto shape for evaluation durations; omit for constant unit times
    #[arg(long)]
    alpha: Option<f64>,
    /// Evaluation budget per trial
    #[arg(long)]
    max_evals: usize,
    /// Simulated-time budget per trial
    #[arg(long, default_value_t = f64::INFINITY)]
    time_budget: f64,
    #[arg(long, default_value_t = 1)]
    trials: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initial design: slhd, lhd, or factorial2
    #[arg(long, default_value = "slhd")]
    design: String,
    /// Surrogate family: rbf or gp
    #[arg(long, default_value = "rbf")]
    surrogate: String,
    /// Sampling strategy: srbf, dycors, uniform, ei, pi, or lcb
    #[arg(long, default_value = "dycors")]
    strategy: String,
    /// Candidate count per proposal; defaults to 100 * dim
    #[arg(long)]
    num_cand: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Output format: csv or json
    #[arg(long, default_value = "csv")]
    format: String,
    /// Include evaluated coordinates as x0..x{d-1} CSV columns
    #[arg(long)]
    dump_points: bool,
}

#[derive(clap::Args)]
struct SpeedupArgs {
    /// Comma-separated JSON trace files from `run --format json`
    #[arg(long = "in", value_delimiter = ',')]
    inputs: Vec<PathBuf>,
    /// Number of error targets inside the range intersection
    #[arg(long)]
    targets: usize,
    /// Report path; a .csv extension selects CSV, anything else JSON
    #[arg(long)]
    out: PathBuf,
}

fn run_command(args: &RunArgs) -> Result<(), Error> {
    let problem = lookup(&args.problem, args.dim)?;
    let mode = Mode::parse(&args.mode, args.workers)?;
    let sampler = SamplerKind::parse(&args.strategy)?;
    let design = DesignKind::parse(&args.design)
        .ok_or_else(|| Error::Config(format!("unknown design {:?}", args.design)))?;
    let needs_gp = sampler.uses_gp();
    match args.surrogate.to_ascii_lowercase().as_str() {
        "rbf" if !needs_gp => {}
        "gp" if needs_gp => {}
        "rbf" | "gp" => {
            return Err(Error::Config(format!(
                "strategy {:?} does not run on the {} surrogate",
                args.strategy, args.surrogate
            )))
        }
        other => return Err(Error::Config(format!("unknown surrogate {other:?}"))),
    }
    let format = EmitFormat::parse(&args.format)?;

    let mut spec = ExperimentSpec::new(problem, mode, args.max_evals, args.time_budget);
    spec.alpha = args.alpha;
    spec.trials = args.trials;
    spec.base_seed = args.seed;
    spec.sampler = sampler;
    spec.design = design;
    spec.num_cand = args.num_cand;

    let traces = run_experiment(&spec)?;
    match format {
        EmitFormat::Csv => write_traces_csv(&traces, &args.out, args.dump_points),
        EmitFormat::Json => write_traces_json(&traces, &args.out),
    }
}

fn speedup_command(args: &SpeedupArgs) -> Result<(), Error> {
    if args.inputs.is_empty() {
        return Err(Error::Config("no input trace files given".into()));
    }
    let mut traces = Vec::new();
    for path in &args.inputs {
        traces.extend(read_traces_json(path)?);
    }
    let report = compute_speedup(&traces, args.targets)?;
    if args.out.extension().is_some_and(|e| e == "csv") {
        write_report_csv(&report, &args.out)
    } else {
        write_report_json(&report, &args.out)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownProblem(_) | Error::Speedup(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run_command(args),
        Command::Speedup(args) => speedup_command(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sot-bench: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
