//! Exhaustive search over small allocation instances.
//!
//! These enumerate every allocation and share no code with the planner's
//! search, so the planner can be checked against them on small inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::comm_model::CommProfile;
use crate::perf_model::PerfCurve;
use crate::planner::{plan_zero01, plan_zero23};
use crate::profiler::ProfileSample;
use crate::stage::ZeroStage;

pub const MAX_ZERO01_DEVICES: usize = 4;
pub const MAX_ZERO01_GBS: u64 = 32;
pub const MAX_ZERO23_DEVICES: usize = 3;
pub const MAX_ZERO23_CAP: usize = 8;
pub const MAX_ZERO23_GBS: u64 = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Zero01Optimum {
    /// Smallest achievable `max_i time_i(g_i)`.
    pub min_t: f64,
    pub argmin_t: Vec<u64>,
    /// Smallest achievable speed-weighted idle time.
    pub min_objective: f64,
    pub argmin_objective: Vec<u64>,
    /// Allocations enumerated.
    pub enumerated: u64,
}

/// Enumerates every `g` with `Σ g_i = gbs` and `g_i <= times[i].len() - 1`.
///
/// `times[i][g]` is device `i`'s total busy time for `g` batches.
/// Returns `None` when no allocation exists.
pub fn brute_force_zero01(gbs: u64, times: &[Vec<f64>], weights: &[f64]) -> Option<Zero01Optimum> {
    assert!(
        times.len() <= MAX_ZERO01_DEVICES && gbs <= MAX_ZERO01_GBS,
        "instance too large"
    );
    assert_eq!(times.len(), weights.len());
    let n = times.len();
    let mut best: Option<Zero01Optimum> = None;
    let mut count = 0u64;
    let mut g = vec![0u64; n];
    loop {
        if g.iter().sum::<u64>() == gbs {
            count += 1;
            let busy: Vec<f64> = (0..n).map(|i| times[i][g[i] as usize]).collect();
            let t = busy.iter().copied().fold(0.0, f64::max);
            let obj: f64 = busy.iter().zip(weights).map(|(b, w)| (t - b) * w).sum();
            match &mut best {
                None => {
                    best = Some(Zero01Optimum {
                        min_t: t,
                        argmin_t: g.clone(),
                        min_objective: obj,
                        argmin_objective: g.clone(),
                        enumerated: 0,
                    })
                }
                Some(b) => {
                    if t < b.min_t {
                        b.min_t = t;
                        b.argmin_t = g.clone();
                    }
                    if obj < b.min_objective {
                        b.min_objective = obj;
                        b.argmin_objective = g.clone();
                    }
                }
            }
        }
        // Odometer increment over the per-device ranges.
        let mut i = 0;
        loop {
            if i == n {
                return best.map(|mut b| {
                    b.enumerated = count;
                    b
                });
            }
            if (g[i] as usize) + 1 < times[i].len() {
                g[i] += 1;
                break;
            }
            g[i] = 0;
            i += 1;
        }
    }
}

/// `times[i][g] = g / speeds[i]` for `g` in `0..=cap`.
pub fn constant_speed_tables(speeds: &[f64], cap: u64) -> Vec<Vec<f64>> {
    speeds
        .iter()
        .map(|&s| (0..=cap).map(|g| g as f64 / s).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Zero23Optimum {
    pub min_wall: f64,
    pub micro: Vec<u32>,
    pub gas: u64,
    pub enumerated: u64,
}

/// Enumerates every micro-batch vector `b_i in 0..=cap_i` and minimizes
/// `(max_i time_i(b_i) + comm_per_step) * ceil(gbs / Σ b_i)`.
///
/// `times[i][b]` is the step time at batch `b`, with `times[i][0] = 0`.
pub fn brute_force_zero23(
    gbs: u64,
    times: &[Vec<f64>],
    comm_per_step: f64,
) -> Option<Zero23Optimum> {
    assert!(
        times.len() <= MAX_ZERO23_DEVICES && gbs <= MAX_ZERO23_GBS,
        "instance too large"
    );
    assert!(
        times
            .iter()
            .all(|t| !t.is_empty() && t.len() <= MAX_ZERO23_CAP + 1),
        "cap too large"
    );
    let n = times.len();
    let mut best: Option<Zero23Optimum> = None;
    let mut count = 0u64;
    let mut b = vec![0u32; n];
    loop {
        count += 1;
        let micro: u64 = b.iter().map(|&v| v as u64).sum();
        if micro > 0 {
            let span = (0..n).map(|i| times[i][b[i] as usize]).fold(0.0, f64::max);
            let gas = gbs.div_ceil(micro);
            let wall = (span + comm_per_step) * gas as f64;
            if best.as_ref().is_none_or(|o| wall < o.min_wall) {
                best = Some(Zero23Optimum {
                    min_wall: wall,
                    micro: b.clone(),
                    gas,
                    enumerated: 0,
                });
            }
        }
        let mut i = 0;
        loop {
            if i == n {
                return best.map(|mut o| {
                    o.enumerated = count;
                    o
                });
            }
            if (b[i] as usize) + 1 < times[i].len() {
                b[i] += 1;
                break;
            }
            b[i] = 0;
            i += 1;
        }
    }
}

/// Step-time tables `0..=mbs` predicted by `curves`.
pub fn tables_from_curves(curves: &[PerfCurve]) -> Vec<Vec<f64>> {
    curves
        .iter()
        .map(|c| std::iter::once(0.0).chain(c.step_times()).collect())
        .collect()
}

/// Results of a randomized planner-versus-oracle sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSummary {
    pub seed: u64,
    pub instances: u64,
    pub zero01_breaches: u64,
    pub zero23_breaches: u64,
    /// Largest planner/oracle wall ratio seen for stages 2/3.
    pub worst_zero23_ratio: f64,
    /// Largest `T_plan - (T_oracle + 1/min_speed)` seen for stages 0/1; positive means breach.
    pub worst_zero01_excess: f64,
}

impl CheckSummary {
    pub fn passed(&self) -> bool {
        self.zero01_breaches == 0 && self.zero23_breaches == 0
    }
}

pub const ZERO23_RATIO_BOUND: f64 = 1.05;

fn zero_comm(stage: ZeroStage, per_step: f64) -> CommProfile {
    CommProfile {
        stage,
        volume_forward: 0.0,
        volume_backward: 0.0,
        volume_optimizer: 0.0,
        fwd_allgather_time: 0.0,
        bwd_allgather_time: 0.0,
        reduce_scatter_time: 0.0,
        time_per_step: per_step,
        time_per_iteration: 0.0,
    }
}

/// A random small curve with dense samples from an affine latent model.
pub fn random_curve(rng: &mut impl Rng, device_id: usize, mbs: u32) -> PerfCurve {
    let c0 = rng.gen_range(0.01..0.5);
    let c1 = rng.gen_range(0.01..0.3);
    let samples: Vec<ProfileSample> = (1..=mbs)
        .map(|b| ProfileSample {
            batch: b,
            seconds: c0 + c1 * b as f64,
        })
        .collect();
    crate::perf_model::build_curve(device_id, &samples, mbs).expect("valid samples")
}

/// Draws `instances` random small problems and compares both planner branches
/// with exhaustive search.
pub fn check_suite(seed: u64, instances: u64) -> CheckSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = CheckSummary {
        seed,
        instances,
        zero01_breaches: 0,
        zero23_breaches: 0,
        worst_zero23_ratio: 0.0,
        worst_zero01_excess: f64::NEG_INFINITY,
    };
    for _ in 0..instances {
        let n = rng.gen_range(1..=MAX_ZERO23_DEVICES);
        let gbs = rng.gen_range(1..=MAX_ZERO23_GBS);
        let curves: Vec<PerfCurve> = (0..n)
            .map(|i| {
                let mbs = rng.gen_range(1..=MAX_ZERO23_CAP as u32);
                random_curve(&mut rng, i, mbs)
            })
            .collect();
        let comm = rng.gen_range(0.0..1.0);
        let planned =
            plan_zero23(gbs, &curves, &zero_comm(ZeroStage::Zero3, comm), 0.0).expect("feasible");
        let oracle = brute_force_zero23(gbs, &tables_from_curves(&curves), comm).expect("feasible");
        let ratio = planned.search_wall_time.unwrap_or(f64::INFINITY) / oracle.min_wall;
        s.worst_zero23_ratio = s.worst_zero23_ratio.max(ratio);
        if ratio > ZERO23_RATIO_BOUND {
            s.zero23_breaches += 1;
        }

        let n = rng.gen_range(1..=MAX_ZERO01_DEVICES.min(3));
        let gbs = rng.gen_range(1..=MAX_ZERO23_GBS);
        let speeds: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..20.0)).collect();
        let curves: Vec<PerfCurve> = speeds
            .iter()
            .enumerate()
            .map(|(i, &v)| PerfCurve::constant(i, v, gbs as u32))
            .collect();
        let planned =
            plan_zero01(gbs, &curves, &zero_comm(ZeroStage::Zero0, 0.0), 0.0).expect("feasible");
        let oracle = brute_force_zero01(gbs, &constant_speed_tables(&speeds, gbs), &speeds)
            .expect("feasible");
        let min_speed = speeds.iter().copied().fold(f64::INFINITY, f64::min);
        let excess = planned.predicted_t - (oracle.min_t + 1.0 / min_speed);
        s.worst_zero01_excess = s.worst_zero01_excess.max(excess);
        if excess > 1e-9 {
            s.zero01_breaches += 1;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero01_two_devices() {
        let t = constant_speed_tables(&[2.0, 1.0], 10);
        let o = brute_force_zero01(10, &t, &[2.0, 1.0]).unwrap();
        assert_eq!(o.argmin_t, vec![7, 3]);
        assert_eq!(o.min_t, 3.5);
        assert_eq!(o.enumerated, 11);
    }

    #[test]
    fn zero01_infeasible_caps() {
        let t = constant_speed_tables(&[1.0, 1.0], 2);
        assert!(brute_force_zero01(5, &t, &[1.0, 1.0]).is_none());
    }

    #[test]
    fn zero23_small() {
        let t = vec![vec![0.0, 1.0, 1.5], vec![0.0, 2.0]];
        let o = brute_force_zero23(6, &t, 0.5).unwrap();
        // (2,0): 2.0 * 3 = 6.0; (2,1): 2.5 * 2 = 5.0; (1,1): 2.5 * 3.
        assert_eq!((o.micro.clone(), o.gas), (vec![2, 1], 2));
        assert_eq!(o.min_wall, 5.0);
        assert_eq!(o.enumerated, 6);
    }

    #[test]
    fn check_suite_passes() {
        let s = check_suite(7, 30);
        assert!(s.passed(), "{s:?}");
    }
}
