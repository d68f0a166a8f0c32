//! Heterogeneity-aware batch allocation for ZeRO data-parallel training,
//! evaluated on a simulated cluster.

pub mod comm_model;
pub mod experiment;
pub mod hardware_sim;
pub mod numerics;
pub mod oracle;
pub mod perf_model;
pub mod pipeline;
pub mod planner;
pub mod profiler;
pub mod simulator;
pub mod stage;

pub use experiment::{parse_spec, ExperimentSpec, OutputFormat};
pub use hardware_sim::{ClusterGroundTruth, DeviceGroundTruth, ModelSpec};
pub use pipeline::{run_pipeline, Command, Error, Report};
pub use planner::{plan, AllocationPlan};
pub use profiler::{profile_cluster, ProfileResult};
pub use simulator::{simulate_run, SimReport};
pub use stage::{StageRequest, ZeroStage};
