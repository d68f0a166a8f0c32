//! Executes allocation plans against the latent ground truth.
//!
//! Every device's `busy` time is the moment it reaches the iteration's final
//! synchronization point. For stages 0/1 that is the end of its own
//! accumulation loop. For stages 2/3 all devices meet after every micro-step,
//! so the earlier steps cost the slowest device's compute plus the per-step
//! collectives, and only the last step differs per device.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm_model::{comm_profile, CommProfile};
use crate::hardware_sim::{run_step_with, ClusterGroundTruth, ModelSpec, OutOfMemory};
use crate::planner::{compute_plan_metrics, AllocationPlan};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    OutOfMemory(#[from] OutOfMemory),
    #[error("plan does not match cluster: {0}")]
    PlanMismatch(String),
    #[error("a run needs at least one iteration")]
    NoIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u64,
    /// Seconds until each device reaches the final synchronization point.
    pub busy: Vec<f64>,
    /// Seconds each device waits there.
    pub idle: Vec<f64>,
    /// `max busy`: the moment the last device arrives.
    pub barrier_time: f64,
    /// Collective seconds of the iteration, including those inside `busy`.
    pub comm_time: f64,
    pub optimizer_time: f64,
    /// Full wall-clock seconds of the iteration.
    pub iteration_time: f64,
    /// Batches per second over the iteration.
    pub throughput: f64,
    /// Speed-weighted idle time.
    pub objective: f64,
    /// Batches each device processed.
    pub batches: Vec<u64>,
    /// Achieved FLOP/s when the model declares FLOPs per batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops_proxy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mean_iteration_time: f64,
    pub mean_throughput: f64,
    pub mean_barrier_time: f64,
    pub mean_objective: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_flops_proxy: Option<f64>,
    /// Throughput relative to the uniform baseline, when one was simulated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup_vs_baseline: Option<f64>,
    pub iterations: Vec<IterationReport>,
}

/// Jitter draw for one (iteration, step) pair; profiling uses nonce 0.
fn nonce(iteration: u64, step: u64) -> u64 {
    ((iteration + 1) << 24) | step
}

struct Runner<'a> {
    cluster: &'a ClusterGroundTruth,
    model: &'a ModelSpec,
    comm: CommProfile,
    iteration: u64,
}

impl Runner<'_> {
    fn compute(&self, device: usize, batch: u32, step: u64) -> Result<f64, OutOfMemory> {
        if batch == 0 {
            return Ok(0.0);
        }
        let trace = run_step_with(
            self.cluster,
            device,
            self.model,
            batch,
            self.comm.stage,
            nonce(self.iteration, step),
            &self.comm,
        )?;
        Ok(trace.compute())
    }
}

pub fn simulate_iteration(
    plan: &AllocationPlan,
    cluster: &ClusterGroundTruth,
    model: &ModelSpec,
    iteration: u64,
) -> Result<IterationReport, SimError> {
    if plan.devices.len() != cluster.len() {
        return Err(SimError::PlanMismatch(format!(
            "plan has {} devices, cluster {}",
            plan.devices.len(),
            cluster.len()
        )));
    }
    let runner = Runner {
        cluster,
        model,
        comm: comm_profile(model, plan.stage, cluster),
        iteration,
    };
    let comm = &runner.comm;

    let (busy, comm_time, trailing_comm) = if plan.stage.syncs_per_micro_step() {
        let gas = plan.gas as u64;
        let mut prefix = 0.0;
        for step in 0..gas.saturating_sub(1) {
            let mut span: f64 = 0.0;
            for d in &plan.devices {
                span = span.max(runner.compute(d.device_id, d.micro_batch, step)?);
            }
            prefix += span + comm.time_per_step;
        }
        let last = gas.saturating_sub(1);
        let busy = plan
            .devices
            .iter()
            .map(|d| Ok(prefix + runner.compute(d.device_id, d.lbs, last)?))
            .collect::<Result<Vec<f64>, OutOfMemory>>()?;
        // Earlier steps' collectives already sit inside `busy`; only the last one trails.
        (
            busy,
            comm.iteration_total(gas),
            comm.time_per_step + comm.time_per_iteration,
        )
    } else {
        let busy = plan
            .devices
            .iter()
            .map(|d| {
                let mut t = 0.0;
                for step in 0..d.gas as u64 {
                    let batch = if step + 1 == d.gas as u64 {
                        d.lbs
                    } else {
                        d.micro_batch
                    };
                    t += runner.compute(d.device_id, batch, step)?;
                }
                Ok(t)
            })
            .collect::<Result<Vec<f64>, OutOfMemory>>()?;
        (busy, comm.time_per_iteration, comm.time_per_iteration)
    };

    let weights = plan.weights();
    let m = compute_plan_metrics(&busy, &weights);
    let optimizer_time = cluster
        .devices
        .iter()
        .map(|d| d.optimizer_time)
        .fold(0.0, f64::max);
    let iteration_time = m.iteration_time + trailing_comm + optimizer_time;
    let throughput = plan.gbs as f64 / iteration_time;
    Ok(IterationReport {
        iteration,
        busy,
        idle: m.idle,
        barrier_time: m.iteration_time,
        comm_time,
        optimizer_time,
        iteration_time,
        throughput,
        objective: m.objective,
        batches: plan.devices.iter().map(|d| d.gmbs).collect(),
        flops_proxy: model
            .flops_per_batch
            .map(|f| f * plan.gbs as f64 / iteration_time),
    })
}

/// Mean that is exact when every value is identical.
fn stable_mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut it = values.clone();
    let Some(first) = it.next() else { return 0.0 };
    let n = values.clone().count() as f64;
    first + values.map(|v| v - first).sum::<f64>() / n
}

pub fn simulate_run(
    plan: &AllocationPlan,
    cluster: &ClusterGroundTruth,
    model: &ModelSpec,
    iterations: u64,
) -> Result<SimReport, SimError> {
    if iterations == 0 {
        return Err(SimError::NoIterations);
    }
    let iterations = (0..iterations)
        .map(|i| simulate_iteration(plan, cluster, model, i))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = |f: fn(&IterationReport) -> f64| stable_mean(iterations.iter().map(f));
    Ok(SimReport {
        mean_iteration_time: mean(|r| r.iteration_time),
        mean_throughput: mean(|r| r.throughput),
        mean_barrier_time: mean(|r| r.barrier_time),
        mean_objective: mean(|r| r.objective),
        mean_flops_proxy: model
            .flops_per_batch
            .map(|_| mean(|r| r.flops_proxy.unwrap_or(0.0))),
        speedup_vs_baseline: None,
        iterations,
    })
}

/// Throughput ratio of `planned` over `baseline`.
pub fn compare_plans(planned: &SimReport, baseline: &SimReport) -> f64 {
    planned.mean_throughput / baseline.mean_throughput
}
