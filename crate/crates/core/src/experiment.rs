//! Experiment spec files.

use serde::{Deserialize, Serialize};

use crate::hardware_sim::{ClusterGroundTruth, ModelSpec};
use crate::stage::StageRequest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    /// Pretty-printed JSON.
    #[default]
    Obj,
    /// CSV rows.
    Table,
}

impl std::str::FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "obj" => Ok(Self::Obj),
            "table" => Ok(Self::Table),
            other => Err(format!("unknown format `{other}`, expected obj or table")),
        }
    }
}

fn default_iterations() -> u64 {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub cluster: ClusterGroundTruth,
    pub model: ModelSpec,
    pub gbs: u64,
    #[serde(default)]
    pub stage: StageRequest,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    /// Jitter seed; replaces `cluster.seed` when the experiment runs.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub format: OutputFormat,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{message}")]
pub struct SpecError {
    /// Dotted path of the offending field, when known.
    pub field: Option<String>,
    pub line: Option<usize>,
    pub message: String,
}

impl SpecError {
    fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        let field = field.into();
        let message = format!("{field}: {}", message.into());
        Self {
            field: Some(field),
            line: None,
            message,
        }
    }
}

pub fn parse_spec(content: &str) -> Result<ExperimentSpec, SpecError> {
    let de = &mut serde_json::Deserializer::from_str(content);
    let spec: ExperimentSpec = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let line = inner.line();
        let field = (path != ".").then_some(path);
        let message = match &field {
            Some(f) => format!("{f}: {inner}"),
            None => inner.to_string(),
        };
        SpecError {
            field,
            line: (line > 0).then_some(line),
            message,
        }
    })?;
    spec.validate()?;
    Ok(spec)
}

fn positive(field: String, v: f64) -> Result<(), SpecError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(SpecError::field(
            field,
            format!("must be positive and finite, got {v}"),
        ))
    }
}

fn non_negative(field: String, v: f64) -> Result<(), SpecError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(SpecError::field(
            field,
            format!("must be non-negative and finite, got {v}"),
        ))
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.gbs == 0 {
            return Err(SpecError::field("gbs", "must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(SpecError::field("iterations", "must be at least 1"));
        }
        let c = &self.cluster;
        if c.devices.is_empty() {
            return Err(SpecError::field(
                "cluster.devices",
                "needs at least one device",
            ));
        }
        if c.link_bandwidths.len() != c.devices.len() {
            return Err(SpecError::field(
                "cluster.link_bandwidths",
                format!(
                    "has {} entries for {} devices",
                    c.link_bandwidths.len(),
                    c.devices.len()
                ),
            ));
        }
        for (i, bw) in c.link_bandwidths.iter().enumerate() {
            positive(format!("cluster.link_bandwidths[{i}]"), *bw)?;
        }
        non_negative("cluster.link_latency".into(), c.link_latency)?;
        if !(0.0..1.0).contains(&c.jitter) {
            return Err(SpecError::field(
                "cluster.jitter",
                format!("must be in [0, 1), got {}", c.jitter),
            ));
        }
        for (i, d) in c.devices.iter().enumerate() {
            let at = |f: &str| format!("cluster.devices[{i}].{f}");
            if d.total_mem == 0 {
                return Err(SpecError::field(at("total_mem"), "must be positive"));
            }
            if d.act_mem_per_batch == 0 {
                return Err(SpecError::field(
                    at("act_mem_per_batch"),
                    "must be positive",
                ));
            }
            non_negative(at("compute_fixed"), d.compute_fixed)?;
            positive(at("compute_per_batch"), d.compute_per_batch)?;
            non_negative(at("optimizer_time"), d.optimizer_time)?;
        }
        let m = &self.model;
        if m.hidden_size == 0 {
            return Err(SpecError::field("model.hidden_size", "must be positive"));
        }
        if m.num_layers == 0 {
            return Err(SpecError::field("model.num_layers", "must be positive"));
        }
        if m.bytes_per_param == 0 {
            return Err(SpecError::field(
                "model.bytes_per_param",
                "must be positive",
            ));
        }
        if m.optimizer_state_multiplier < 2 * m.bytes_per_param {
            return Err(SpecError::field(
                "model.optimizer_state_multiplier",
                "must cover parameter and gradient bytes",
            ));
        }
        if let Some(f) = m.flops_per_batch {
            positive("model.flops_per_batch".into(), f)?;
        }
        Ok(())
    }

    /// Cluster with device ids matching positions and the experiment seed applied.
    pub fn runtime_cluster(&self) -> ClusterGroundTruth {
        let mut c = ClusterGroundTruth::new(
            self.cluster.devices.clone(),
            self.cluster.link_bandwidths.clone(),
            self.cluster.link_latency,
        );
        c.jitter = self.cluster.jitter;
        c.seed = self.seed;
        c
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }
}
