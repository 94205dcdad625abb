use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized watermark survival in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ProvenanceScore(f64);

impl ProvenanceScore {
    /// Clamps into `[0, 1]`; NaN maps to 0.
    pub fn clamped(v: f64) -> Self {
        Self(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
    }

    pub fn new(v: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&v) {
            Ok(Self(v))
        } else {
            Err(Error::param(format!("provenance {v} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FidelitySource {
    Builtin,
    External,
}

/// Visual-utility score on a 0–100 scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityScore {
    value: f64,
    pub source: FidelitySource,
}

impl FidelityScore {
    pub fn new(value: f64, source: FidelitySource) -> Result<Self> {
        if (0.0..=100.0).contains(&value) {
            Ok(Self { value, source })
        } else {
            Err(Error::param(format!("fidelity {value} outside [0, 100]")))
        }
    }

    pub fn value(self) -> f64 {
        self.value
    }
}

/// Which watermark family a trial belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Codec {
    Latent,
    Spatial,
}

impl Codec {
    pub const ALL: [Codec; 2] = [Codec::Latent, Codec::Spatial];

    pub fn name(self) -> &'static str {
        match self {
            Codec::Latent => "latent",
            Codec::Spatial => "spatial",
        }
    }
}

impl std::fmt::Display for Codec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Codec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "latent" => Ok(Codec::Latent),
            "spatial" => Ok(Codec::Spatial),
            other => Err(Error::param(format!("unknown codec '{other}'"))),
        }
    }
}
