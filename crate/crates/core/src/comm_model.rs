//! Collective communication volumes and a flat latency + bandwidth cost model.
//!
//! Volume convention per ZeRO stage, in parameter-sized units (Ψ):
//!
//! | stage | every micro-step                         | once per iteration (optimizer time) |
//! |-------|------------------------------------------|-------------------------------------|
//! | 0, 1  | none                                     | 2Ψ gradient all-reduce              |
//! | 2     | 1Ψ gradient reduce-scatter (backward)    | 1Ψ parameter all-gather             |
//! | 3     | 1Ψ all-gather fwd, 1Ψ all-gather + 1Ψ reduce-scatter bwd | none                |
//!
//! With one micro-step per iteration this adds up to 2Ψ, 2Ψ, 2Ψ and 3Ψ.

use serde::{Deserialize, Serialize};

use crate::hardware_sim::{ClusterGroundTruth, ModelSpec};
use crate::stage::ZeroStage;

/// Feed-forward block traffic in elements for a stage-3 pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnVolume {
    /// Forward all-gather, `8dh²`.
    pub forward: u128,
    /// Backward all-gather plus reduce-scatter, `16dh²`.
    pub backward: u128,
}

impl FfnVolume {
    pub fn total(&self) -> u128 {
        self.forward + self.backward
    }
}

/// Per-pass FFN weight traffic: each of the two `h x 4h` projections moves once
/// per collective, and a pass issues three collectives.
pub fn ffn_comm_breakdown(hidden: u64, layers: u64) -> FfnVolume {
    let (h, d) = (hidden as u128, layers as u128);
    let per_collective = (h * 4 * h + 4 * h * h) * d;
    FfnVolume {
        forward: per_collective,
        backward: 2 * per_collective,
    }
}

/// Total FFN communication volume in elements, `24dh²`.
pub fn ffn_comm_volume(hidden: u64, layers: u64) -> u128 {
    ffn_comm_breakdown(hidden, layers).total()
}

/// Multiplier of Ψ moved per optimizer-synchronized step.
pub fn stage_volume_multiplier(stage: ZeroStage) -> u64 {
    match stage {
        ZeroStage::Zero0 | ZeroStage::Zero1 | ZeroStage::Zero2 => 2,
        ZeroStage::Zero3 => 3,
    }
}

/// Bytes moved per optimizer-synchronized step (one micro-step).
pub fn stage_comm_volume(model: &ModelSpec, stage: ZeroStage) -> f64 {
    stage_volume_multiplier(stage) as f64 * model.parameter_bytes()
}

/// Seconds for one collective: launch latency plus volume over the bottleneck link.
pub fn collective_time(volume: f64, cluster: &ClusterGroundTruth) -> f64 {
    cluster.link_latency + volume / cluster.bottleneck_bandwidth()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommProfile {
    pub stage: ZeroStage,
    /// Bytes gathered during each micro-step's forward.
    pub volume_forward: f64,
    /// Bytes moved during each micro-step's backward.
    pub volume_backward: f64,
    /// Bytes moved once per iteration at optimizer time.
    pub volume_optimizer: f64,
    pub fwd_allgather_time: f64,
    pub bwd_allgather_time: f64,
    pub reduce_scatter_time: f64,
    /// Collective seconds charged on every micro-step.
    pub time_per_step: f64,
    /// Collective seconds charged once per iteration.
    pub time_per_iteration: f64,
}

impl CommProfile {
    /// Total collective seconds of an iteration with `gas` micro-steps.
    pub fn iteration_total(&self, gas: u64) -> f64 {
        self.time_per_step * gas as f64 + self.time_per_iteration
    }
}

pub fn comm_profile(
    model: &ModelSpec,
    stage: ZeroStage,
    cluster: &ClusterGroundTruth,
) -> CommProfile {
    let psi = model.parameter_bytes();
    let ct = |v: f64| collective_time(v, cluster);
    match stage {
        ZeroStage::Zero0 | ZeroStage::Zero1 => CommProfile {
            stage,
            volume_forward: 0.0,
            volume_backward: 0.0,
            volume_optimizer: 2.0 * psi,
            fwd_allgather_time: 0.0,
            bwd_allgather_time: 0.0,
            reduce_scatter_time: 0.0,
            time_per_step: 0.0,
            time_per_iteration: ct(2.0 * psi),
        },
        ZeroStage::Zero2 => {
            let rs = ct(psi);
            CommProfile {
                stage,
                volume_forward: 0.0,
                volume_backward: psi,
                volume_optimizer: psi,
                fwd_allgather_time: 0.0,
                bwd_allgather_time: 0.0,
                reduce_scatter_time: rs,
                time_per_step: rs,
                time_per_iteration: ct(psi),
            }
        }
        ZeroStage::Zero3 => {
            let (agf, agb, rs) = (ct(psi), ct(psi), ct(psi));
            CommProfile {
                stage,
                volume_forward: psi,
                volume_backward: 2.0 * psi,
                volume_optimizer: 0.0,
                fwd_allgather_time: agf,
                bwd_allgather_time: agb,
                reduce_scatter_time: rs,
                time_per_step: agf + agb + rs,
                time_per_iteration: 0.0,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hardware_sim::DeviceGroundTruth;
    use proptest::prelude::*;

    fn cluster(bw: Vec<f64>, latency: f64) -> ClusterGroundTruth {
        let devices = bw
            .iter()
            .map(|_| DeviceGroundTruth {
                id: 0,
                name: "d".into(),
                total_mem: 1 << 34,
                act_mem_per_batch: 1 << 20,
                compute_fixed: 0.0,
                compute_per_batch: 0.01,
                optimizer_time: 0.0,
            })
            .collect();
        ClusterGroundTruth::new(devices, bw, latency)
    }

    #[test]
    fn ffn_volume_values() {
        assert_eq!(ffn_comm_volume(1, 1), 24);
        assert_eq!(ffn_comm_volume(2, 3), 288);
        assert_eq!(ffn_comm_volume(4096, 8), 3_221_225_472);
        let b = ffn_comm_breakdown(7, 5);
        assert_eq!((b.forward, b.backward), (8 * 5 * 49, 16 * 5 * 49));
    }

    #[test]
    fn stage_volumes() {
        let m = ModelSpec::new(1_000_000, 64, 2);
        assert_eq!(stage_comm_volume(&m, ZeroStage::Zero0), 4e6);
        assert_eq!(stage_comm_volume(&m, ZeroStage::Zero3), 6e6);
        assert_eq!(
            stage_comm_volume(&m, ZeroStage::Zero1),
            stage_comm_volume(&m, ZeroStage::Zero2)
        );
    }

    #[test]
    fn profile_volumes_sum_to_stage_volume() {
        let m = ModelSpec::new(12_345, 64, 2);
        let c = cluster(vec![1e9], 0.0);
        for stage in ZeroStage::ALL {
            let p = comm_profile(&m, stage, &c);
            let sum = p.volume_forward + p.volume_backward + p.volume_optimizer;
            assert_eq!(sum, stage_comm_volume(&m, stage));
        }
    }

    #[test]
    fn bottleneck_governs_time() {
        assert_eq!(collective_time(1e9, &cluster(vec![1e9, 1e10], 0.0)), 1.0);
        assert_eq!(collective_time(0.0, &cluster(vec![1e9], 0.25)), 0.25);
        // Four NVLink-class links and one PCIe-class link.
        let c = cluster(vec![3e11, 3e11, 3e11, 3e11, 1.6e10], 5e-6);
        assert_eq!(collective_time(8e9, &c), 5e-6 + 8e9 / 1.6e10);
    }

    proptest! {
        #[test]
        fn time_monotone(v in 0.0f64..1e12, dv in 0.0f64..1e12, bw in 1e6f64..1e12, boost in 1.0f64..10.0) {
            let slow = cluster(vec![bw, bw * 2.0], 1e-5);
            let fast = cluster(vec![bw * boost, bw * 2.0 * boost], 1e-5);
            prop_assert!(collective_time(v + dv, &slow) >= collective_time(v, &slow));
            prop_assert!(collective_time(v, &fast) <= collective_time(v, &slow));
        }

        #[test]
        fn stage3_moves_most(params in 1u64..1 << 40) {
            let m = ModelSpec::new(params, 8, 1);
            let s3 = stage_comm_volume(&m, ZeroStage::Zero3);
            for s in [ZeroStage::Zero0, ZeroStage::Zero1, ZeroStage::Zero2] {
                prop_assert!(s3 >= stage_comm_volume(&m, s));
            }
        }
    }
}
