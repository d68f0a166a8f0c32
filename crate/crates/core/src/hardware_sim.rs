//! Latent ground truth for simulated GPUs and their interconnect.
//!
//! Nothing outside this module reads the latent parameters directly when
//! planning; the profiler only sees them through [`run_step`] and
//! [`memory_probe`], the same way it would observe real hardware.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm_model::{comm_profile, CommProfile};
use crate::stage::ZeroStage;

/// A simulated out-of-memory failure. Recoverable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("device {device} out of memory: needs {required} bytes, has {available}")]
pub struct OutOfMemory {
    pub device: usize,
    pub required: u128,
    pub available: u64,
}

fn default_bytes_per_param() -> u64 {
    2
}

fn default_state_multiplier() -> u64 {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Parameter count.
    pub param_count: u64,
    pub hidden_size: u64,
    pub num_layers: u64,
    /// Bytes per parameter (and per gradient element) in the training precision.
    #[serde(default = "default_bytes_per_param")]
    pub bytes_per_param: u64,
    /// Bytes of parameter + gradient + optimizer state per parameter when fully replicated.
    #[serde(default = "default_state_multiplier")]
    pub optimizer_state_multiplier: u64,
    /// Optional FLOPs per unit batch, used only for the FLOPs proxy in reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops_per_batch: Option<f64>,
}

impl ModelSpec {
    pub fn new(param_count: u64, hidden_size: u64, num_layers: u64) -> Self {
        Self {
            param_count,
            hidden_size,
            num_layers,
            bytes_per_param: default_bytes_per_param(),
            optimizer_state_multiplier: default_state_multiplier(),
            flops_per_batch: None,
        }
    }

    /// Per-parameter byte shares `(param, grad, optimizer)`.
    pub fn state_shares(&self) -> (u64, u64, u64) {
        let p = self.bytes_per_param;
        (p, p, self.optimizer_state_multiplier.saturating_sub(2 * p))
    }

    pub fn parameter_bytes(&self) -> f64 {
        self.param_count as f64 * self.bytes_per_param as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceGroundTruth {
    #[serde(default)]
    pub id: usize,
    pub name: String,
    /// Device memory in bytes.
    pub total_mem: u64,
    /// Activation bytes per unit of batch.
    pub act_mem_per_batch: u64,
    /// Fixed seconds per step.
    pub compute_fixed: f64,
    /// Seconds per unit of batch.
    pub compute_per_batch: f64,
    #[serde(default)]
    pub optimizer_time: f64,
}

impl DeviceGroundTruth {
    /// Latent compute seconds for one forward+backward at `batch`, before jitter.
    pub fn latent_compute(&self, batch: u32) -> f64 {
        self.compute_fixed + self.compute_per_batch * batch as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterGroundTruth {
    pub devices: Vec<DeviceGroundTruth>,
    /// Bytes/second of each device's link; collectives run at the slowest one.
    pub link_bandwidths: Vec<f64>,
    /// Seconds per collective launch.
    #[serde(default)]
    pub link_latency: f64,
    #[serde(default)]
    pub seed: u64,
    /// Multiplicative timing jitter amplitude in `[0, 1)`; 0 disables jitter.
    #[serde(default)]
    pub jitter: f64,
}

impl ClusterGroundTruth {
    /// Builds a cluster, re-numbering device ids to match positions.
    pub fn new(
        mut devices: Vec<DeviceGroundTruth>,
        link_bandwidths: Vec<f64>,
        link_latency: f64,
    ) -> Self {
        for (i, d) in devices.iter_mut().enumerate() {
            d.id = i;
        }
        Self {
            devices,
            link_bandwidths,
            link_latency,
            seed: 0,
            jitter: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn bottleneck_bandwidth(&self) -> f64 {
        self.link_bandwidths
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Multiplicative factor applied to compute time for one (device, batch, nonce) step.
    fn jitter_factor(&self, device: usize, batch: u32, nonce: u64) -> f64 {
        if self.jitter == 0.0 {
            return 1.0;
        }
        let key = splitmix(
            self.seed ^ splitmix(device as u64 ^ splitmix(batch as u64 ^ splitmix(nonce))),
        );
        let u: f64 = ChaCha8Rng::seed_from_u64(key).gen();
        1.0 + self.jitter * (2.0 * u - 1.0)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-phase timing of one simulated training step.
///
/// `allreduce` holds the iteration-level synchronization collective issued at
/// optimizer time: the gradient all-reduce for stages 0/1 and the parameter
/// all-gather that follows the sharded update in stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepTrace {
    pub forward_compute: f64,
    pub backward_compute: f64,
    pub fwd_allgather: f64,
    pub bwd_allgather: f64,
    pub reduce_scatter: f64,
    pub allreduce: f64,
    pub optimizer_step: f64,
}

impl StepTrace {
    pub fn compute(&self) -> f64 {
        self.forward_compute + self.backward_compute
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryProbe {
    pub before_forward: u64,
    pub after_forward: u64,
    pub total: u64,
}

fn div_ceil(num: u128, den: u128) -> u128 {
    num.div_ceil(den)
}

/// Bytes of model state resident on each of `n` devices at `stage`.
///
/// Sharded shares are rounded up, matching padded partitions.
pub fn resident_state_bytes(model: &ModelSpec, stage: ZeroStage, n: usize) -> u64 {
    let n = n.max(1) as u128;
    let psi = model.param_count as u128;
    let (p, g, o) = model.state_shares();
    let (p, g, o) = (p as u128 * psi, g as u128 * psi, o as u128 * psi);
    let bytes = match stage {
        ZeroStage::Zero0 => p + g + o,
        ZeroStage::Zero1 => p + g + div_ceil(o, n),
        ZeroStage::Zero2 => p + div_ceil(g + o, n),
        ZeroStage::Zero3 => div_ceil(p + g + o, n),
    };
    u64::try_from(bytes).unwrap_or(u64::MAX)
}

fn check_fits(
    cluster: &ClusterGroundTruth,
    device: &DeviceGroundTruth,
    model: &ModelSpec,
    batch: u32,
    stage: ZeroStage,
) -> Result<(), OutOfMemory> {
    let resident = resident_state_bytes(model, stage, cluster.len()) as u128;
    let required = resident + device.act_mem_per_batch as u128 * batch as u128;
    if required > device.total_mem as u128 {
        return Err(OutOfMemory {
            device: device.id,
            required,
            available: device.total_mem,
        });
    }
    Ok(())
}

/// Largest batch that fits on `device_id` at `stage` under the latent memory model.
///
/// Test and verification helper; the profiler never calls this.
pub fn latent_max_batch(
    cluster: &ClusterGroundTruth,
    device_id: usize,
    model: &ModelSpec,
    stage: ZeroStage,
) -> u64 {
    let d = &cluster.devices[device_id];
    let resident = resident_state_bytes(model, stage, cluster.len());
    d.total_mem.saturating_sub(resident) / d.act_mem_per_batch
}

/// Runs one simulated step (forward, backward and optimizer) with nonce 0.
pub fn run_step(
    cluster: &ClusterGroundTruth,
    device_id: usize,
    model: &ModelSpec,
    batch: u32,
    stage: ZeroStage,
) -> Result<StepTrace, OutOfMemory> {
    run_step_at(cluster, device_id, model, batch, stage, 0)
}

/// Like [`run_step`], with `nonce` selecting the jitter draw.
pub fn run_step_at(
    cluster: &ClusterGroundTruth,
    device_id: usize,
    model: &ModelSpec,
    batch: u32,
    stage: ZeroStage,
    nonce: u64,
) -> Result<StepTrace, OutOfMemory> {
    let comm = comm_profile(model, stage, cluster);
    run_step_with(cluster, device_id, model, batch, stage, nonce, &comm)
}

pub(crate) fn run_step_with(
    cluster: &ClusterGroundTruth,
    device_id: usize,
    model: &ModelSpec,
    batch: u32,
    stage: ZeroStage,
    nonce: u64,
    comm: &CommProfile,
) -> Result<StepTrace, OutOfMemory> {
    let device = &cluster.devices[device_id];
    check_fits(cluster, device, model, batch, stage)?;
    let compute = device.latent_compute(batch) * cluster.jitter_factor(device_id, batch, nonce);
    let forward = compute / 3.0;
    Ok(StepTrace {
        forward_compute: forward,
        backward_compute: compute - forward,
        fwd_allgather: comm.fwd_allgather_time,
        bwd_allgather: comm.bwd_allgather_time,
        reduce_scatter: comm.reduce_scatter_time,
        allreduce: comm.time_per_iteration,
        optimizer_step: device.optimizer_time,
    })
}

/// Memory counters around a batch-1 forward pass.
pub fn memory_probe(
    cluster: &ClusterGroundTruth,
    device_id: usize,
    model: &ModelSpec,
    stage: ZeroStage,
) -> Result<MemoryProbe, OutOfMemory> {
    let device = &cluster.devices[device_id];
    check_fits(cluster, device, model, 1, stage)?;
    let before = resident_state_bytes(model, stage, cluster.len());
    Ok(MemoryProbe {
        before_forward: before,
        after_forward: before + device.act_mem_per_batch,
        total: device.total_mem,
    })
}
