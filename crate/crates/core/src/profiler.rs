//! Online profiling: discover each device's max batch size and sample its step time.
//!
//! Per device the profiler takes a batch-1 memory reading to get a theoretical
//! upper bound, then probes batch sizes 1, 2, 4, ... up to that bound and
//! bisects the bracket around the first OOM. Every successful probe becomes a
//! timing sample for curve fitting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm_model::comm_profile;
use crate::hardware_sim::{
    memory_probe, run_step_with, ClusterGroundTruth, MemoryProbe, ModelSpec, StepTrace,
};
use crate::stage::{StageRequest, ZeroStage};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("model does not fit at ZeRO stage 3 on device {device} even with batch size 1")]
    ModelTooLarge { device: usize },
    #[error("device {device} cannot run batch size 1 at ZeRO stage {stage}")]
    NoBatchFits { device: usize, stage: ZeroStage },
    #[error("inconsistent step trace: {0}")]
    InconsistentTrace(String),
    #[error("cluster has no devices")]
    EmptyCluster,
}

/// One timing observation: compute seconds of a step at `batch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    pub batch: u32,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: usize,
    pub mbs: u32,
    /// Sorted by batch, one entry per distinct batch size.
    pub samples: Vec<ProfileSample>,
    /// Number of `run_step` invocations spent on this device.
    pub probes: u32,
    /// Optimizer seconds observed on the last successful probe.
    pub optimizer_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileResult {
    pub requested_stage: StageRequest,
    pub effective_stage: ZeroStage,
    pub devices: Vec<DeviceProfile>,
}

impl ProfileResult {
    pub fn probes_used(&self) -> u32 {
        self.devices.iter().map(|d| d.probes).sum()
    }

    pub fn mbs(&self) -> Vec<u32> {
        self.devices.iter().map(|d| d.mbs).collect()
    }
}

/// Compute seconds of a step with the stage's collectives excluded.
///
/// Stages 0/1 time the forward and backward passes, which run without
/// collectives. Stage 2 leaves the backward reduce-scatter out; stage 3 leaves
/// out the forward all-gather and the backward all-gather and reduce-scatter.
/// Either way the result is the trace's forward plus backward compute.
pub fn time_consumed_during_step(trace: &StepTrace, stage: ZeroStage) -> Result<f64, ProfileError> {
    let excluded: &[(&str, f64)] = match stage {
        ZeroStage::Zero0 | ZeroStage::Zero1 => &[],
        ZeroStage::Zero2 => &[("reduce_scatter", trace.reduce_scatter)],
        ZeroStage::Zero3 => &[
            ("fwd_allgather", trace.fwd_allgather),
            ("bwd_allgather", trace.bwd_allgather),
            ("reduce_scatter", trace.reduce_scatter),
        ],
    };
    if let Some((name, v)) = excluded.iter().find(|(_, v)| v.is_nan() || *v < 0.0) {
        return Err(ProfileError::InconsistentTrace(format!("{name} = {v}")));
    }
    let t = trace.forward_compute + trace.backward_compute;
    if !t.is_finite() || t < 0.0 {
        return Err(ProfileError::InconsistentTrace(format!("compute time {t}")));
    }
    Ok(t)
}

/// `floor((total - before) / (after - before))`: the batch-1 linear memory bound.
///
/// `None` when a batch of 1 itself does not fit.
pub fn theoretical_mbs(probe: &MemoryProbe) -> Option<u32> {
    let slope = probe.after_forward.checked_sub(probe.before_forward)?;
    if probe.after_forward > probe.total || slope == 0 {
        return None;
    }
    let mbs = (probe.total - probe.before_forward) / slope;
    Some(mbs.min(u32::MAX as u64) as u32)
}

/// Theoretical max batch from a live batch-1 memory probe.
///
/// Fails with [`ProfileError::NoBatchFits`] when stage escalation is needed.
pub fn estimate_theoretical_mbs(
    cluster: &ClusterGroundTruth,
    device_id: usize,
    model: &ModelSpec,
    stage: ZeroStage,
) -> Result<u32, ProfileError> {
    let no_fit = ProfileError::NoBatchFits {
        device: device_id,
        stage,
    };
    let probe = memory_probe(cluster, device_id, model, stage).map_err(|_| no_fit.clone())?;
    theoretical_mbs(&probe).ok_or(no_fit)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MbsSearch {
    pub mbs: u32,
    pub samples: Vec<ProfileSample>,
    pub probes: u32,
    pub optimizer_time: f64,
}

/// Finds the largest batch `<= estimate` that runs without OOM.
pub fn search_mbs(
    cluster: &ClusterGroundTruth,
    device_id: usize,
    model: &ModelSpec,
    stage: ZeroStage,
    estimate: u32,
) -> Result<MbsSearch, ProfileError> {
    let cap = estimate.max(1);
    let comm = comm_profile(model, stage, cluster);
    let mut samples: Vec<ProfileSample> = Vec::new();
    let mut probes = 0u32;
    let mut optimizer_time = 0.0;

    let mut probe = |batch: u32| -> Result<bool, ProfileError> {
        probes += 1;
        match run_step_with(cluster, device_id, model, batch, stage, 0, &comm) {
            Ok(trace) => {
                samples.push(ProfileSample {
                    batch,
                    seconds: time_consumed_during_step(&trace, stage)?,
                });
                optimizer_time = trace.optimizer_step;
                Ok(true)
            }
            Err(_) => Ok(false),
        }
    };

    // Exponential phase: 1, 2, 4, ... capped at the estimate.
    let mut last_ok = 0u32;
    let mut batch = 1u32;
    let first_oom = loop {
        if !probe(batch)? {
            break batch;
        }
        last_ok = batch;
        if batch == cap {
            break 0;
        }
        batch = batch.saturating_mul(2).min(cap);
    };

    let mbs = if first_oom == 0 {
        cap
    } else if last_ok == 0 {
        return Err(ProfileError::NoBatchFits {
            device: device_id,
            stage,
        });
    } else {
        // `low` always runs and `high` always OOMs.
        let (mut low, mut high) = (last_ok, first_oom);
        while high - low > 1 {
            let mid = low + (high - low) / 2;
            if probe(mid)? {
                low = mid;
            } else {
                high = mid;
            }
        }
        low
    };

    samples.sort_by_key(|s| s.batch);
    samples.dedup_by_key(|s| s.batch);
    Ok(MbsSearch {
        mbs,
        samples,
        probes,
        optimizer_time,
    })
}

fn profile_device(
    cluster: &ClusterGroundTruth,
    device_id: usize,
    model: &ModelSpec,
    stage: ZeroStage,
) -> Result<DeviceProfile, ProfileError> {
    let estimate = estimate_theoretical_mbs(cluster, device_id, model, stage)?;
    let found = search_mbs(cluster, device_id, model, stage, estimate)?;
    Ok(DeviceProfile {
        device_id,
        mbs: found.mbs,
        samples: found.samples,
        probes: found.probes,
        optimizer_time: found.optimizer_time,
    })
}

/// Profiles every device, escalating the ZeRO stage until batch 1 fits everywhere.
pub fn profile_cluster(
    cluster: &ClusterGroundTruth,
    model: &ModelSpec,
    request: StageRequest,
) -> Result<ProfileResult, ProfileError> {
    if cluster.is_empty() {
        return Err(ProfileError::EmptyCluster);
    }
    let mut stage = request.starting_stage();
    loop {
        let blocked = (0..cluster.len())
            .find(|&id| estimate_theoretical_mbs(cluster, id, model, stage).is_err());
        match (blocked, stage.escalate()) {
            (None, _) => break,
            (Some(_), Some(next)) => stage = next,
            (Some(device), None) => return Err(ProfileError::ModelTooLarge { device }),
        }
    }
    let devices = (0..cluster.len())
        .into_par_iter()
        .map(|id| profile_device(cluster, id, model, stage))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ProfileResult {
        requested_stage: request,
        effective_stage: stage,
        devices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hardware_sim::{latent_max_batch, run_step, DeviceGroundTruth};
    use proptest::prelude::*;

    const GIB: u64 = 1 << 30;

    fn device(total: u64, act: u64) -> DeviceGroundTruth {
        DeviceGroundTruth {
            id: 0,
            name: "gpu".into(),
            total_mem: total,
            act_mem_per_batch: act,
            compute_fixed: 0.1,
            compute_per_batch: 0.05,
            optimizer_time: 0.0,
        }
    }

    fn single(total: u64, act: u64) -> ClusterGroundTruth {
        ClusterGroundTruth::new(vec![device(total, act)], vec![1e10], 0.0)
    }

    /// A model with zero parameters leaves the whole device for activations.
    fn empty_model() -> ModelSpec {
        ModelSpec::new(0, 16, 1)
    }

    #[test]
    fn stage_time_rules() {
        let base = StepTrace {
            forward_compute: 0.1,
            backward_compute: 0.2,
            ..Default::default()
        };
        assert_eq!(
            time_consumed_during_step(&base, ZeroStage::Zero0).unwrap(),
            0.1 + 0.2
        );
        let z2 = StepTrace {
            reduce_scatter: 0.05,
            ..base
        };
        assert_eq!(
            time_consumed_during_step(&z2, ZeroStage::Zero2).unwrap(),
            0.1 + 0.2
        );
        let z3 = StepTrace {
            fwd_allgather: 0.03,
            bwd_allgather: 0.03,
            reduce_scatter: 0.04,
            ..base
        };
        assert_eq!(
            time_consumed_during_step(&z3, ZeroStage::Zero3).unwrap(),
            0.1 + 0.2
        );
        let bad = StepTrace {
            backward_compute: -0.5,
            ..base
        };
        assert!(time_consumed_during_step(&bad, ZeroStage::Zero0).is_err());
        let bad_rs = StepTrace {
            reduce_scatter: -1.0,
            ..base
        };
        assert!(time_consumed_during_step(&bad_rs, ZeroStage::Zero2).is_err());
    }

    #[test]
    fn theoretical_estimates() {
        let probe = |bf: u64, af: u64, total: u64| MemoryProbe {
            before_forward: bf,
            after_forward: af,
            total,
        };
        assert_eq!(
            theoretical_mbs(&probe(4 * GIB, 4 * GIB + GIB / 2, 16 * GIB)),
            Some(24)
        );
        assert_eq!(
            theoretical_mbs(&probe(9 * GIB, 9 * GIB + GIB / 2, 10 * GIB)),
            Some(2)
        );
        assert_eq!(
            theoretical_mbs(&probe(16 * GIB, 16 * GIB + GIB / 2, 16 * GIB)),
            None
        );

        let c = single(16 * GIB, 16 * GIB + 1);
        assert_eq!(
            estimate_theoretical_mbs(&c, 0, &empty_model(), ZeroStage::Zero0),
            Err(ProfileError::NoBatchFits {
                device: 0,
                stage: ZeroStage::Zero0
            })
        );
    }

    #[test]
    fn search_converges_on_exact_threshold() {
        let c = single(24 * GIB, GIB);
        let m = empty_model();
        let found = search_mbs(&c, 0, &m, ZeroStage::Zero0, 24).unwrap();
        assert_eq!(found.mbs, 24);
        assert!(run_step(&c, 0, &m, 24, ZeroStage::Zero0).is_ok());
        assert!(run_step(&c, 0, &m, 25, ZeroStage::Zero0).is_err());
        let batches: Vec<u32> = found.samples.iter().map(|s| s.batch).collect();
        assert_eq!(batches, vec![1, 2, 4, 8, 16, 24]);

        // An overestimate forces the OOM bracket [16, 32) and bisection.
        let found = search_mbs(&c, 0, &m, ZeroStage::Zero0, 40).unwrap();
        assert_eq!(found.mbs, 24);
        assert!(found.probes <= 2 * 5 + 4);
    }

    #[test]
    fn search_small_and_capped() {
        let m = empty_model();
        let found = search_mbs(&single(GIB, GIB), 0, &m, ZeroStage::Zero0, 4).unwrap();
        assert_eq!(found.mbs, 1);
        assert_eq!(found.probes, 2);

        let found = search_mbs(&single(100 * GIB, GIB), 0, &m, ZeroStage::Zero0, 7).unwrap();
        assert_eq!(found.mbs, 7);
        assert_eq!(found.probes, 4);
        let batches: Vec<u32> = found.samples.iter().map(|s| s.batch).collect();
        assert_eq!(batches, vec![1, 2, 4, 7]);
    }

    #[test]
    fn profile_matches_latent_thresholds() {
        let c = ClusterGroundTruth::new(
            vec![device(40 * GIB, GIB), device(13 * GIB, GIB / 2)],
            vec![1e10, 1e10],
            0.0,
        );
        let m = ModelSpec::new(GIB / 16, 1024, 4);
        let r = profile_cluster(&c, &m, StageRequest::Auto).unwrap();
        assert_eq!(r.effective_stage, ZeroStage::Zero0);
        for d in &r.devices {
            assert_eq!(
                d.mbs as u64,
                latent_max_batch(&c, d.device_id, &m, ZeroStage::Zero0)
            );
        }
        assert_eq!(r.mbs(), vec![39, 24]);
    }

    #[test]
    fn escalates_to_minimal_fitting_stage() {
        // 3 Gi params: 48 GiB at stage 0, 21 GiB at stage 1, 16.5 GiB at stage 2
        // and 12 GiB at stage 3 across four 16 GiB devices.
        let m = ModelSpec::new(3 * GIB, 2048, 24);
        let d = device(16 * GIB, GIB / 4);
        let c =
            ClusterGroundTruth::new(vec![d.clone(), d.clone(), d.clone(), d], vec![1e10; 4], 0.0);
        let expected = ZeroStage::ALL
            .into_iter()
            .find(|&s| crate::hardware_sim::resident_state_bytes(&m, s, 4) + GIB / 4 <= 16 * GIB)
            .unwrap();
        let r = profile_cluster(&c, &m, StageRequest::Fixed(ZeroStage::Zero0)).unwrap();
        assert_eq!(r.effective_stage, expected);
        assert_eq!(expected, ZeroStage::Zero3);
    }

    #[test]
    fn model_too_large() {
        let c = single(GIB, GIB / 4);
        let m = ModelSpec::new(GIB, 1024, 4);
        assert_eq!(
            profile_cluster(&c, &m, StageRequest::Auto),
            Err(ProfileError::ModelTooLarge { device: 0 })
        );
    }

    proptest! {
        #[test]
        fn exact_safe_and_within_budget(act in 1u64..1 << 20, m in 1u64..4096, slack in 0.0f64..1.0, over in 1.0f64..3.0) {
            let total = act * m + (slack * act as f64) as u64;
            let c = single(total, act);
            let model = empty_model();
            let estimate = estimate_theoretical_mbs(&c, 0, &model, ZeroStage::Zero0).unwrap();
            prop_assert_eq!(estimate as u64, m);
            for est in [estimate, (estimate as f64 * over).ceil() as u32] {
                let found = search_mbs(&c, 0, &model, ZeroStage::Zero0, est).unwrap();
                prop_assert_eq!(found.mbs as u64, m);
                prop_assert!(run_step(&c, 0, &model, found.mbs, ZeroStage::Zero0).is_ok());
                let log = (m as f64).log2().ceil() as u32;
                prop_assert!(found.probes <= 2 * log + 4);
                prop_assert!(found.samples.iter().all(|s| s.batch <= found.mbs));
            }
        }
    }
}
