//! `hetzero`: profile, plan, simulate and compare batch allocations on a
//! simulated heterogeneous cluster.
//!
//! Usage:
//!   hetzero <profile|plan|simulate|compare|check> --spec <path> [--gbs N] [--stage 0|1|2|3|auto]
//!           [--iterations N] [--seed N] [--out <path>] [--format obj|table] [--plan <path>]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use hetzero_core::experiment::{parse_spec, ExperimentSpec, OutputFormat};
use hetzero_core::pipeline::{run_pipeline, Command, Error, RunOptions, EXIT_VALIDATION};
use hetzero_core::planner::AllocationPlan;
use hetzero_core::StageRequest;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    /// Discover max batch sizes and sample step times.
    Profile,
    /// Fit curves and emit an allocation plan.
    Plan,
    /// Simulate the plan and the uniform baseline.
    Simulate,
    /// Speedup over the uniform baseline, per stage.
    Compare,
    /// Compare the planner with exhaustive search on random small instances.
    Check,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Profile => Command::Profile,
            Cmd::Plan => Command::Plan,
            Cmd::Simulate => Command::Simulate,
            Cmd::Compare => Command::Compare,
            Cmd::Check => Command::Check,
        }
    }
}

#[derive(Parser)]
#[command(name = "hetzero", version, about)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,

    /// Experiment spec (JSON). Optional for `check`.
    #[arg(long)]
    spec: Option<PathBuf>,

    /// Overrides the spec's global batch size.
    #[arg(long)]
    gbs: Option<u64>,

    /// Overrides the spec's ZeRO stage.
    #[arg(long)]
    stage: Option<StageRequest>,

    /// Overrides the spec's iteration count; for `check`, the number of instances.
    #[arg(long)]
    iterations: Option<u64>,

    #[arg(long)]
    seed: Option<u64>,

    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long)]
    format: Option<OutputFormat>,

    /// Plan file (the `plan` field of a `plan` report, or a bare plan) for `simulate`.
    #[arg(long)]
    plan: Option<PathBuf>,
}

fn read(path: &PathBuf) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn load_spec(cli: &Cli) -> Result<Option<ExperimentSpec>, Error> {
    let Some(path) = &cli.spec else {
        return Ok(None);
    };
    let mut spec = parse_spec(&read(path)?).map_err(|mut e| {
        e.message = format!("{}: {}", path.display(), e.message);
        e
    })?;
    if let Some(v) = cli.gbs {
        spec.gbs = v;
    }
    if let Some(v) = cli.stage {
        spec.stage = v;
    }
    if let Some(v) = cli.iterations {
        spec.iterations = v;
    }
    if let Some(v) = cli.seed {
        spec.seed = v;
    }
    if let Some(v) = cli.format {
        spec.format = v;
    }
    spec.validate()?;
    Ok(Some(spec))
}

fn load_plan(path: &PathBuf) -> Result<AllocationPlan, Error> {
    let text = read(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::PlanFile(e.to_string()))?;
    let inner = value.get("plan").cloned().unwrap_or(value);
    serde_json::from_value(inner).map_err(|e| Error::PlanFile(e.to_string()))
}

fn run(cli: &Cli) -> Result<i32, Error> {
    let spec = load_spec(cli)?;
    let opts = RunOptions {
        plan: cli.plan.as_ref().map(load_plan).transpose()?,
        check_instances: cli.iterations,
        check_seed: cli.seed,
    };
    let report = run_pipeline(spec.as_ref(), cli.command.into(), &opts)?;
    let format = cli
        .format
        .or(spec.as_ref().map(|s| s.format))
        .unwrap_or_default();
    emit(cli, &report.render(format))?;
    Ok(report.exit_code())
}

fn emit(cli: &Cli, text: &str) -> Result<(), Error> {
    match &cli.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage errors are validation errors; exit status 2 means infeasible here.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                EXIT_VALIDATION as u8
            } else {
                0
            });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
