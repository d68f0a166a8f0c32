use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// ZeRO partitioning level. Stage 0 replicates everything; 1 shards optimizer
/// states; 2 also shards gradients; 3 also shards parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ZeroStage {
    Zero0,
    Zero1,
    Zero2,
    Zero3,
}

impl ZeroStage {
    pub const ALL: [ZeroStage; 4] = [Self::Zero0, Self::Zero1, Self::Zero2, Self::Zero3];

    pub fn index(self) -> u8 {
        self as u8
    }

    /// The next stage up, or `None` at stage 3.
    pub fn escalate(self) -> Option<Self> {
        match self {
            Self::Zero0 => Some(Self::Zero1),
            Self::Zero1 => Some(Self::Zero2),
            Self::Zero2 => Some(Self::Zero3),
            Self::Zero3 => None,
        }
    }

    /// Stages 2 and 3 synchronize every micro-step.
    pub fn syncs_per_micro_step(self) -> bool {
        matches!(self, Self::Zero2 | Self::Zero3)
    }
}

impl TryFrom<u8> for ZeroStage {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Self::Zero0),
            1 => Ok(Self::Zero1),
            2 => Ok(Self::Zero2),
            3 => Ok(Self::Zero3),
            _ => Err(format!("ZeRO stage must be 0..=3, got {v}")),
        }
    }
}

impl fmt::Display for ZeroStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

impl Serialize for ZeroStage {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.index())
    }
}

impl<'de> Deserialize<'de> for ZeroStage {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        ZeroStage::try_from(v).map_err(serde::de::Error::custom)
    }
}

/// A stage as requested by the operator: a fixed starting stage or `auto`
/// (start at 0 and escalate as needed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StageRequest {
    #[default]
    Auto,
    Fixed(ZeroStage),
}

impl StageRequest {
    pub fn starting_stage(self) -> ZeroStage {
        match self {
            Self::Auto => ZeroStage::Zero0,
            Self::Fixed(s) => s,
        }
    }
}

impl FromStr for StageRequest {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "auto" => Ok(Self::Auto),
            other => other
                .parse::<u8>()
                .map_err(|_| format!("stage must be 0, 1, 2, 3 or auto, got `{other}`"))
                .and_then(ZeroStage::try_from)
                .map(Self::Fixed),
        }
    }
}

impl fmt::Display for StageRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::Fixed(s) => write!(f, "{s}"),
        }
    }
}

impl Serialize for StageRequest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Auto => s.serialize_str("auto"),
            Self::Fixed(stage) => stage.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for StageRequest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u8),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => ZeroStage::try_from(n)
                .map(Self::Fixed)
                .map_err(serde::de::Error::custom),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}
