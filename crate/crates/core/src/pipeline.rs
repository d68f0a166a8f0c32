//! Command handlers behind the `hetzero` binary.

use serde::Serialize;
use thiserror::Error;

use crate::experiment::{ExperimentSpec, OutputFormat, SpecError};
use crate::oracle::{check_suite, CheckSummary};
use crate::perf_model::PerfCurve;
use crate::planner::{plan, uniform_plan_for, AllocationPlan, PlanError};
use crate::profiler::{profile_cluster, ProfileError, ProfileResult};
use crate::simulator::{compare_plans, simulate_run, SimError, SimReport};
use crate::stage::{StageRequest, ZeroStage};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_CHECK_FAILED: i32 = 3;

/// Instances drawn by `check` unless overridden.
pub const DEFAULT_CHECK_INSTANCES: u64 = 200;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid plan file: {0}")]
    PlanFile(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Profile(
                ProfileError::ModelTooLarge { .. } | ProfileError::NoBatchFits { .. },
            ) => EXIT_INFEASIBLE,
            Error::Plan(PlanError::Infeasible) => EXIT_INFEASIBLE,
            Error::Sim(SimError::OutOfMemory(_)) => EXIT_INFEASIBLE,
            _ => EXIT_VALIDATION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Profile,
    Plan,
    Simulate,
    Compare,
    Check,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanReport {
    pub profile: ProfileResult,
    pub curves: Vec<PerfCurve>,
    pub plan: AllocationPlan,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateReport {
    pub plan: AllocationPlan,
    pub baseline_plan: AllocationPlan,
    pub planned: SimReport,
    pub baseline: SimReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub requested_stage: ZeroStage,
    pub effective_stage: ZeroStage,
    pub gas: u32,
    pub predicted_wall_time: f64,
    pub planned_iteration_time: f64,
    pub baseline_iteration_time: f64,
    pub planned_throughput: f64,
    pub baseline_throughput: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub gbs: u64,
    pub rows: Vec<CompareRow>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Report {
    Profile(ProfileResult),
    Plan(Box<PlanReport>),
    Simulate(Box<SimulateReport>),
    Compare(CompareReport),
    Check(CheckSummary),
}

impl Report {
    /// Exit status implied by the report's content.
    pub fn exit_code(&self) -> i32 {
        match self {
            Report::Check(s) if !s.passed() => EXIT_CHECK_FAILED,
            _ => EXIT_OK,
        }
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Obj => {
                let mut s = serde_json::to_string_pretty(self).expect("report serializes");
                s.push('\n');
                s
            }
            OutputFormat::Table => self.render_table(),
        }
    }

    fn render_table(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut row = |r: Vec<String>| w.write_record(r).expect("in-memory write");
        let f = |v: f64| v.to_string();
        match self {
            Report::Profile(p) => {
                row(["device_id", "mbs", "probes", "batch", "seconds"]
                    .map(String::from)
                    .to_vec());
                for d in &p.devices {
                    for s in &d.samples {
                        row(vec![
                            d.device_id.to_string(),
                            d.mbs.to_string(),
                            d.probes.to_string(),
                            s.batch.to_string(),
                            f(s.seconds),
                        ]);
                    }
                }
            }
            Report::Plan(p) => {
                row([
                    "device_id",
                    "mbs",
                    "peak_speed",
                    "micro_batch",
                    "gas",
                    "lbs",
                    "gmbs",
                    "predicted_busy",
                ]
                .map(String::from)
                .to_vec());
                for d in &p.plan.devices {
                    row(vec![
                        d.device_id.to_string(),
                        d.mbs.to_string(),
                        f(d.peak_speed),
                        d.micro_batch.to_string(),
                        d.gas.to_string(),
                        d.lbs.to_string(),
                        d.gmbs.to_string(),
                        f(d.predicted_busy),
                    ]);
                }
            }
            Report::Simulate(s) => {
                row([
                    "policy",
                    "iteration",
                    "iteration_time",
                    "throughput",
                    "barrier_time",
                    "objective",
                ]
                .map(String::from)
                .to_vec());
                for (name, rep) in [("planned", &s.planned), ("uniform", &s.baseline)] {
                    for it in &rep.iterations {
                        row(vec![
                            name.into(),
                            it.iteration.to_string(),
                            f(it.iteration_time),
                            f(it.throughput),
                            f(it.barrier_time),
                            f(it.objective),
                        ]);
                    }
                }
            }
            Report::Compare(c) => {
                row([
                    "requested_stage",
                    "effective_stage",
                    "gas",
                    "predicted_wall_time",
                    "planned_iteration_time",
                    "baseline_iteration_time",
                    "planned_throughput",
                    "baseline_throughput",
                    "speedup",
                ]
                .map(String::from)
                .to_vec());
                for r in &c.rows {
                    row(vec![
                        r.requested_stage.to_string(),
                        r.effective_stage.to_string(),
                        r.gas.to_string(),
                        f(r.predicted_wall_time),
                        f(r.planned_iteration_time),
                        f(r.baseline_iteration_time),
                        f(r.planned_throughput),
                        f(r.baseline_throughput),
                        f(r.speedup),
                    ]);
                }
            }
            Report::Check(c) => {
                row([
                    "seed",
                    "instances",
                    "zero01_breaches",
                    "zero23_breaches",
                    "worst_zero23_ratio",
                    "worst_zero01_excess",
                    "passed",
                ]
                .map(String::from)
                .to_vec());
                row(vec![
                    c.seed.to_string(),
                    c.instances.to_string(),
                    c.zero01_breaches.to_string(),
                    c.zero23_breaches.to_string(),
                    f(c.worst_zero23_ratio),
                    f(c.worst_zero01_excess),
                    c.passed().to_string(),
                ]);
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Inputs beyond the spec file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Plan to simulate instead of planning afresh.
    pub plan: Option<AllocationPlan>,
    /// Instance count for `check`.
    pub check_instances: Option<u64>,
    /// Seed for `check`; falls back to the spec's seed, then 0.
    pub check_seed: Option<u64>,
}

pub fn run_profile(spec: &ExperimentSpec, stage: StageRequest) -> Result<ProfileResult, Error> {
    Ok(profile_cluster(
        &spec.runtime_cluster(),
        &spec.model,
        stage,
    )?)
}

pub fn run_plan(spec: &ExperimentSpec) -> Result<PlanReport, Error> {
    let profile = run_profile(spec, spec.stage)?;
    let (plan, curves) = plan(spec.gbs, &profile, &spec.runtime_cluster(), &spec.model)?;
    Ok(PlanReport {
        profile,
        curves,
        plan,
    })
}

fn simulate_pair(
    spec: &ExperimentSpec,
    stage: StageRequest,
    given: Option<&AllocationPlan>,
) -> Result<SimulateReport, Error> {
    let cluster = spec.runtime_cluster();
    let stage = match given {
        Some(p) => StageRequest::Fixed(p.stage),
        None => stage,
    };
    let profile = run_profile(spec, stage)?;
    let planned_plan = match given {
        Some(p) => {
            if p.stage != profile.effective_stage {
                return Err(Error::PlanFile(format!(
                    "plan is for stage {} but the cluster profiles at stage {}",
                    p.stage, profile.effective_stage
                )));
            }
            if p.gbs != spec.gbs {
                return Err(Error::PlanFile(format!(
                    "plan gbs {} differs from spec gbs {}",
                    p.gbs, spec.gbs
                )));
            }
            p.validate(&profile.mbs()).map_err(Error::PlanFile)?;
            p.clone()
        }
        None => plan(spec.gbs, &profile, &cluster, &spec.model)?.0,
    };
    let baseline_plan = uniform_plan_for(spec.gbs, &profile, &cluster, &spec.model)?;
    let mut planned = simulate_run(&planned_plan, &cluster, &spec.model, spec.iterations)?;
    let baseline = simulate_run(&baseline_plan, &cluster, &spec.model, spec.iterations)?;
    planned.speedup_vs_baseline = Some(compare_plans(&planned, &baseline));
    Ok(SimulateReport {
        plan: planned_plan,
        baseline_plan,
        planned,
        baseline,
    })
}

pub fn run_simulate(
    spec: &ExperimentSpec,
    given: Option<&AllocationPlan>,
) -> Result<SimulateReport, Error> {
    simulate_pair(spec, spec.stage, given)
}

/// One row per ZeRO stage for `auto`, otherwise a single row.
pub fn run_compare(spec: &ExperimentSpec) -> Result<CompareReport, Error> {
    let stages: Vec<ZeroStage> = match spec.stage {
        StageRequest::Auto => ZeroStage::ALL.to_vec(),
        StageRequest::Fixed(s) => vec![s],
    };
    let mut rows = Vec::new();
    for requested in stages {
        let r = simulate_pair(spec, StageRequest::Fixed(requested), None)?;
        rows.push(CompareRow {
            requested_stage: requested,
            effective_stage: r.plan.stage,
            gas: r.plan.gas,
            predicted_wall_time: r.plan.predicted_wall_time,
            planned_iteration_time: r.planned.mean_iteration_time,
            baseline_iteration_time: r.baseline.mean_iteration_time,
            planned_throughput: r.planned.mean_throughput,
            baseline_throughput: r.baseline.mean_throughput,
            speedup: compare_plans(&r.planned, &r.baseline),
        });
    }
    Ok(CompareReport {
        gbs: spec.gbs,
        rows,
    })
}

pub fn run_check(seed: u64, instances: u64) -> CheckSummary {
    check_suite(seed, instances)
}

/// Runs `command`. `spec` may be `None` only for `check`.
pub fn run_pipeline(
    spec: Option<&ExperimentSpec>,
    command: Command,
    opts: &RunOptions,
) -> Result<Report, Error> {
    let need = || {
        spec.ok_or_else(|| {
            Error::Spec(SpecError {
                field: None,
                line: None,
                message: "--spec is required".into(),
            })
        })
    };
    Ok(match command {
        Command::Profile => {
            let s = need()?;
            Report::Profile(run_profile(s, s.stage)?)
        }
        Command::Plan => Report::Plan(Box::new(run_plan(need()?)?)),
        Command::Simulate => Report::Simulate(Box::new(run_simulate(need()?, opts.plan.as_ref())?)),
        Command::Compare => Report::Compare(run_compare(need()?)?),
        Command::Check => Report::Check(run_check(
            opts.check_seed.or(spec.map(|s| s.seed)).unwrap_or(0),
            opts.check_instances.unwrap_or(DEFAULT_CHECK_INSTANCES),
        )),
    })
}
