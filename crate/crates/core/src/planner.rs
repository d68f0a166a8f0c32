//! Batch allocation search.
//!
//! Stages 0/1 synchronize once per iteration, so each device accumulates its
//! own share (`gmbs`) of the global batch at its own pace; the share is set
//! proportional to peak speed and the integer remainder is handed out one
//! batch at a time to the most under-utilized device.
//!
//! Stages 2/3 synchronize every micro-step. The search sweeps a per-step time
//! budget `t`, gives each device the largest batch it finishes within `t`, and
//! keeps the budget minimizing `(t + comm_per_step) * gas`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm_model::{comm_profile, CommProfile};
use crate::hardware_sim::{ClusterGroundTruth, ModelSpec};
use crate::perf_model::{build_curve, CurveError, PerfCurve, StepTimeTable};
use crate::profiler::ProfileResult;
use crate::stage::ZeroStage;

/// Evenly spaced budgets in the stage-2/3 sweep, on top of every exact step-time knot.
pub const SWEEP_GRID_POINTS: usize = 512;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("invalid planner input: {0}")]
    InvalidInput(String),
    #[error("no step-time budget admits a non-empty micro-batch")]
    Infeasible,
    #[error("stage {stage} is not handled by this planner branch")]
    StageMismatch { stage: ZeroStage },
    #[error(transparent)]
    Curve(#[from] CurveError),
}

/// Iteration time, idle time and under-utilization for given finish times and weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMetrics {
    pub iteration_time: f64,
    pub idle: Vec<f64>,
    pub under_utilization: Vec<f64>,
    pub objective: f64,
}

pub fn compute_plan_metrics(finish_times: &[f64], weights: &[f64]) -> PlanMetrics {
    assert_eq!(finish_times.len(), weights.len(), "one weight per device");
    let iteration_time = finish_times.iter().copied().fold(0.0, f64::max);
    let idle: Vec<f64> = finish_times.iter().map(|t| iteration_time - t).collect();
    let under_utilization: Vec<f64> = idle.iter().zip(weights).map(|(d, p)| d * p).collect();
    let objective = under_utilization.iter().sum();
    PlanMetrics {
        iteration_time,
        idle,
        under_utilization,
        objective,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceAssignment {
    pub device_id: usize,
    pub mbs: u32,
    /// Weight used in the under-utilization objective.
    pub peak_speed: f64,
    /// Batch per accumulation step (`b_i`).
    pub micro_batch: u32,
    /// Accumulation steps this device runs.
    pub gas: u32,
    /// Batch of the final accumulation step.
    pub lbs: u32,
    /// Total batches this device processes per iteration (`gmbs_i`).
    pub gmbs: u64,
    /// Predicted seconds until this device reaches the final synchronization point.
    pub predicted_busy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub stage: ZeroStage,
    pub gbs: u64,
    /// Gradient accumulation steps of the iteration (max over devices for stages 0/1).
    pub gas: u32,
    pub devices: Vec<DeviceAssignment>,
    pub predicted_t: f64,
    pub predicted_idle: Vec<f64>,
    pub objective: f64,
    /// Predicted wall-clock seconds of a full iteration, communication and optimizer included.
    pub predicted_wall_time: f64,
    /// Chosen per-step budget `t` (stages 2/3).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_time: Option<f64>,
    /// Sweep objective `(t + comm_per_step) * gas` of the chosen budget (stages 2/3).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_wall_time: Option<f64>,
    pub comm_per_step: f64,
    pub comm_per_iteration: f64,
    pub optimizer_time: f64,
}

impl AllocationPlan {
    pub fn total_assigned(&self) -> u64 {
        self.devices.iter().map(|d| d.gmbs).sum()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.devices.iter().map(|d| d.peak_speed).collect()
    }

    /// Checks conservation and per-device feasibility against `mbs`.
    pub fn validate(&self, mbs: &[u32]) -> Result<(), String> {
        if mbs.len() != self.devices.len() {
            return Err(format!(
                "plan has {} devices, cluster {}",
                self.devices.len(),
                mbs.len()
            ));
        }
        if self.total_assigned() != self.gbs {
            return Err(format!(
                "assigned {} batches, gbs is {}",
                self.total_assigned(),
                self.gbs
            ));
        }
        if self.gas == 0 {
            return Err("gas must be at least 1".into());
        }
        for (d, &cap) in self.devices.iter().zip(mbs) {
            if d.micro_batch > cap {
                return Err(format!(
                    "device {}: micro batch {} > mbs {}",
                    d.device_id, d.micro_batch, cap
                ));
            }
            if d.lbs > d.micro_batch {
                return Err(format!(
                    "device {}: lbs {} > micro batch {}",
                    d.device_id, d.lbs, d.micro_batch
                ));
            }
            let steps = d.gas as u64;
            let expect = if steps == 0 {
                0
            } else {
                (steps - 1) * d.micro_batch as u64 + d.lbs as u64
            };
            if expect != d.gmbs {
                return Err(format!(
                    "device {}: steps carry {} batches, gmbs {}",
                    d.device_id, expect, d.gmbs
                ));
            }
        }
        Ok(())
    }
}

fn check_inputs(gbs: u64, curves: &[PerfCurve]) -> Result<(), PlanError> {
    if gbs == 0 {
        return Err(PlanError::InvalidInput("gbs must be at least 1".into()));
    }
    if curves.is_empty() {
        return Err(PlanError::InvalidInput("no devices".into()));
    }
    Ok(())
}

/// Hands out `batch_remain` batches one at a time to the device with the largest
/// under-utilization `(time_opt - gmbs_i / speed_i) * speed_i`; ties go to the lowest index.
pub fn allocate_remainder(gmbs: &[u64], curves: &[PerfCurve], batch_remain: u64) -> Vec<u64> {
    let mut out = gmbs.to_vec();
    if batch_remain == 0 {
        return out;
    }
    let speed_total: f64 = curves.iter().map(|c| c.peak_speed).sum();
    let gbs = out.iter().sum::<u64>() + batch_remain;
    let time_opt = gbs as f64 / speed_total;
    for _ in 0..batch_remain {
        let mut best = 0;
        let mut best_u = f64::NEG_INFINITY;
        for (i, c) in curves.iter().enumerate() {
            let u = (time_opt - out[i] as f64 / c.peak_speed) * c.peak_speed;
            if u > best_u {
                best = i;
                best_u = u;
            }
        }
        out[best] += 1;
    }
    out
}

/// Splits `gmbs` into steps of `micro` with a shorter last step.
fn accumulation_steps(gmbs: u64, micro: u32) -> (u32, u32) {
    if gmbs == 0 || micro == 0 {
        return (0, 0);
    }
    let gas = gmbs.div_ceil(micro as u64);
    let lbs = gmbs - (gas - 1) * micro as u64;
    (gas as u32, lbs as u32)
}

/// Builds a stage-0/1 plan from fixed per-device totals and micro batches.
pub(crate) fn assemble_zero01(
    gbs: u64,
    curves: &[PerfCurve],
    gmbs: &[u64],
    micro: &[u32],
    comm: &CommProfile,
    optimizer_time: f64,
) -> AllocationPlan {
    let devices: Vec<DeviceAssignment> = curves
        .iter()
        .zip(gmbs.iter().zip(micro))
        .map(|(c, (&g, &b))| {
            let (gas, lbs) = accumulation_steps(g, b);
            let busy = if gas == 0 {
                0.0
            } else {
                (gas - 1) as f64 * c.step_time(b) + c.step_time(lbs)
            };
            DeviceAssignment {
                device_id: c.device_id,
                mbs: c.mbs,
                peak_speed: c.peak_speed,
                micro_batch: if g == 0 { 0 } else { b },
                gas,
                lbs,
                gmbs: g,
                predicted_busy: busy,
            }
        })
        .collect();
    let busy: Vec<f64> = devices.iter().map(|d| d.predicted_busy).collect();
    let weights: Vec<f64> = devices.iter().map(|d| d.peak_speed).collect();
    let m = compute_plan_metrics(&busy, &weights);
    AllocationPlan {
        stage: comm.stage,
        gbs,
        gas: devices.iter().map(|d| d.gas).max().unwrap_or(0).max(1),
        predicted_t: m.iteration_time,
        predicted_idle: m.idle,
        objective: m.objective,
        predicted_wall_time: m.iteration_time + comm.time_per_iteration + optimizer_time,
        step_time: None,
        search_wall_time: None,
        comm_per_step: comm.time_per_step,
        comm_per_iteration: comm.time_per_iteration,
        optimizer_time,
        devices,
    }
}

/// Stage-0/1 allocation: speed-proportional totals, remainder by under-utilization,
/// micro batches inside each device's peak range.
pub fn plan_zero01(
    gbs: u64,
    curves: &[PerfCurve],
    comm: &CommProfile,
    optimizer_time: f64,
) -> Result<AllocationPlan, PlanError> {
    check_inputs(gbs, curves)?;
    if comm.stage.syncs_per_micro_step() {
        return Err(PlanError::StageMismatch { stage: comm.stage });
    }
    let speed_cluster: f64 = curves.iter().map(|c| c.peak_speed).sum();
    let time_optimal = gbs as f64 / speed_cluster;
    let base: Vec<u64> = curves
        .iter()
        .map(|c| (time_optimal * c.peak_speed + 1e-9).floor() as u64)
        .collect();
    let assigned: u64 = base.iter().sum();
    debug_assert!(assigned <= gbs);
    let gmbs = allocate_remainder(&base, curves, gbs.saturating_sub(assigned));
    let micro: Vec<u32> = curves
        .iter()
        .zip(&gmbs)
        .map(|(c, &g)| g.min(c.peak_range.1 as u64) as u32)
        .collect();
    Ok(assemble_zero01(
        gbs,
        curves,
        &gmbs,
        &micro,
        comm,
        optimizer_time,
    ))
}

/// Largest-remainder split of `total` batches in proportion to `weights`
/// (ties to the lowest index).
fn largest_remainder(total: u64, weights: &[u32]) -> Vec<u32> {
    let sum: u64 = weights.iter().map(|&w| w as u64).sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<u32> = weights
        .iter()
        .map(|&w| (total * w as u64 / sum) as u32)
        .collect();
    let mut order: Vec<(u64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| (total * w as u64 % sum, i))
        .collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - out.iter().map(|&v| v as u64).sum::<u64>();
    for &(_, i) in order.iter().take(short as usize) {
        out[i] += 1;
    }
    out
}

/// Builds a stage-2/3 plan for fixed micro batches `micro`.
pub(crate) fn assemble_zero23(
    gbs: u64,
    curves: &[PerfCurve],
    micro: &[u32],
    comm: &CommProfile,
    optimizer_time: f64,
    budget: Option<(f64, f64)>,
) -> Result<AllocationPlan, PlanError> {
    let micro_total: u64 = micro.iter().map(|&b| b as u64).sum();
    if micro_total == 0 {
        return Err(PlanError::Infeasible);
    }
    let gas = gbs.div_ceil(micro_total);
    let last = gbs - (gas - 1) * micro_total;
    let lbs = largest_remainder(last, micro);

    let full_step = curves
        .iter()
        .zip(micro)
        .map(|(c, &b)| c.step_time(b))
        .fold(0.0, f64::max);
    let prefix = (gas - 1) as f64 * (full_step + comm.time_per_step);
    let devices: Vec<DeviceAssignment> = curves
        .iter()
        .zip(micro.iter().zip(&lbs))
        .map(|(c, (&b, &l))| DeviceAssignment {
            device_id: c.device_id,
            mbs: c.mbs,
            peak_speed: c.peak_speed,
            micro_batch: b,
            gas: gas as u32,
            lbs: l,
            gmbs: (gas - 1) * b as u64 + l as u64,
            predicted_busy: prefix + c.step_time(l),
        })
        .collect();
    let busy: Vec<f64> = devices.iter().map(|d| d.predicted_busy).collect();
    let weights: Vec<f64> = devices.iter().map(|d| d.peak_speed).collect();
    let m = compute_plan_metrics(&busy, &weights);
    Ok(AllocationPlan {
        stage: comm.stage,
        gbs,
        gas: gas as u32,
        predicted_t: m.iteration_time,
        predicted_idle: m.idle,
        objective: m.objective,
        predicted_wall_time: m.iteration_time
            + comm.time_per_step
            + comm.time_per_iteration
            + optimizer_time,
        step_time: budget.map(|b| b.0),
        search_wall_time: budget.map(|b| b.1),
        comm_per_step: comm.time_per_step,
        comm_per_iteration: comm.time_per_iteration,
        optimizer_time,
        devices,
    })
}

/// One evaluated budget of the stage-2/3 sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub t: f64,
    pub micro: Vec<u32>,
    pub gas: u64,
    pub wall: f64,
}

/// Budgets swept by the stage-2/3 search: an even grid over
/// `[min_i time_i(1), max_i time_i(mbs_i)]` plus every step-time knot up to its top.
fn sweep_grid(tables: &[StepTimeTable]) -> Vec<f64> {
    let time_min = tables
        .iter()
        .map(|t| t.time(1))
        .fold(f64::INFINITY, f64::min);
    let time_max = tables
        .iter()
        .map(|t| t.time(t.times().len() as u32))
        .fold(0.0, f64::max);
    let mut grid: Vec<f64> = (0..SWEEP_GRID_POINTS)
        .map(|k| {
            if SWEEP_GRID_POINTS == 1 {
                time_min
            } else {
                time_min + (time_max - time_min) * k as f64 / (SWEEP_GRID_POINTS - 1) as f64
            }
        })
        .collect();
    grid.extend(
        tables
            .iter()
            .flat_map(|t| t.times().iter().copied())
            .filter(|&v| v <= time_max),
    );
    grid.push(time_max);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Evaluates every budget of the sweep. Points with an empty micro-batch are skipped.
pub fn sweep_zero23(gbs: u64, curves: &[PerfCurve], comm_per_step: f64) -> Vec<SweepPoint> {
    let tables: Vec<StepTimeTable> = curves.iter().map(StepTimeTable::new).collect();
    sweep_grid(&tables)
        .into_iter()
        .filter_map(|t| {
            let micro: Vec<u32> = tables.iter().map(|tab| tab.find(t)).collect();
            let total: u64 = micro.iter().map(|&b| b as u64).sum();
            (total > 0).then(|| {
                let gas = gbs.div_ceil(total);
                SweepPoint {
                    t,
                    micro,
                    gas,
                    wall: (t + comm_per_step) * gas as f64,
                }
            })
        })
        .collect()
}

/// Stage-2/3 allocation by sweeping the per-step time budget.
pub fn plan_zero23(
    gbs: u64,
    curves: &[PerfCurve],
    comm: &CommProfile,
    optimizer_time: f64,
) -> Result<AllocationPlan, PlanError> {
    check_inputs(gbs, curves)?;
    if !comm.stage.syncs_per_micro_step() {
        return Err(PlanError::StageMismatch { stage: comm.stage });
    }
    // Ascending t with strict improvement keeps the smallest budget on ties.
    let best = sweep_zero23(gbs, curves, comm.time_per_step)
        .into_iter()
        .fold(None::<SweepPoint>, |best, p| match best {
            Some(b) if b.wall <= p.wall => Some(b),
            _ => Some(p),
        })
        .ok_or(PlanError::Infeasible)?;
    assemble_zero23(
        gbs,
        curves,
        &best.micro,
        comm,
        optimizer_time,
        Some((best.t, best.wall)),
    )
}

/// Curves for every profiled device.
pub fn curves_from_profile(profile: &ProfileResult) -> Result<Vec<PerfCurve>, PlanError> {
    profile
        .devices
        .iter()
        .map(|d| build_curve(d.device_id, &d.samples, d.mbs).map_err(PlanError::from))
        .collect()
}

fn optimizer_time(profile: &ProfileResult) -> f64 {
    profile
        .devices
        .iter()
        .map(|d| d.optimizer_time)
        .fold(0.0, f64::max)
}

/// Full planning step: fit curves from `profile`, then run the branch for its stage.
pub fn plan(
    gbs: u64,
    profile: &ProfileResult,
    cluster: &ClusterGroundTruth,
    model: &ModelSpec,
) -> Result<(AllocationPlan, Vec<PerfCurve>), PlanError> {
    if profile.devices.len() != cluster.len() {
        return Err(PlanError::InvalidInput(format!(
            "profile covers {} devices, cluster has {}",
            profile.devices.len(),
            cluster.len()
        )));
    }
    let stage = profile.effective_stage;
    let curves = curves_from_profile(profile)?;
    let comm = comm_profile(model, stage, cluster);
    let opt = optimizer_time(profile);
    let plan = if stage.syncs_per_micro_step() {
        plan_zero23(gbs, &curves, &comm, opt)?
    } else {
        plan_zero01(gbs, &curves, &comm, opt)?
    };
    Ok((plan, curves))
}

/// Heterogeneity-unaware baseline: equal shares and one micro batch size for
/// every device, limited by the smallest mbs.
pub fn uniform_plan(
    gbs: u64,
    curves: &[PerfCurve],
    comm: &CommProfile,
    optimizer_time: f64,
) -> Result<AllocationPlan, PlanError> {
    check_inputs(gbs, curves)?;
    let n = curves.len() as u64;
    let min_mbs = curves.iter().map(|c| c.mbs).min().unwrap_or(1);
    if comm.stage.syncs_per_micro_step() {
        let b = (gbs.div_ceil(n)).min(min_mbs as u64) as u32;
        assemble_zero23(
            gbs,
            curves,
            &vec![b; curves.len()],
            comm,
            optimizer_time,
            None,
        )
    } else {
        let gmbs: Vec<u64> = (0..n).map(|i| gbs / n + u64::from(i < gbs % n)).collect();
        let micro: Vec<u32> = gmbs.iter().map(|&g| g.min(min_mbs as u64) as u32).collect();
        Ok(assemble_zero01(
            gbs,
            curves,
            &gmbs,
            &micro,
            comm,
            optimizer_time,
        ))
    }
}

/// Baseline for a profiled cluster, mirroring [`plan`].
pub fn uniform_plan_for(
    gbs: u64,
    profile: &ProfileResult,
    cluster: &ClusterGroundTruth,
    model: &ModelSpec,
) -> Result<AllocationPlan, PlanError> {
    let curves = curves_from_profile(profile)?;
    let comm = comm_profile(model, profile.effective_stage, cluster);
    uniform_plan(gbs, &curves, &comm, optimizer_time(profile))
}
