use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeName {
    Weak,
    Medium,
    Strong,
}

impl RegimeName {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegimeName::Weak => "weak",
            RegimeName::Medium => "medium",
            RegimeName::Strong => "strong",
        }
    }
}

impl std::str::FromStr for RegimeName {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "weak" => Ok(RegimeName::Weak),
            "medium" => Ok(RegimeName::Medium),
            "strong" => Ok(RegimeName::Strong),
            other => Err(config(
                "regime",
                format!("unknown regime `{other}` (expected weak, medium or strong)"),
            )),
        }
    }
}

impl std::fmt::Display for RegimeName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Weights of the stage-one objective.
///
/// `L_pre = lambda_xc * L_xc + lambda_cx * L_cx + lambda * (L_KL + gamma * L_con)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub name: RegimeName,
    pub lambda: f64,
    pub gamma: f64,
    pub lambda_xc: f64,
    pub lambda_cx: f64,
}

impl RegimeConfig {
    pub fn weak() -> Self {
        Self {
            name: RegimeName::Weak,
            lambda: 0.0,
            gamma: 0.0,
            lambda_xc: 1.0,
            lambda_cx: 1.0,
        }
    }

    pub fn medium() -> Self {
        Self {
            name: RegimeName::Medium,
            lambda: 1e-2,
            gamma: 0.0,
            ..Self::weak()
        }
    }

    pub fn strong() -> Self {
        Self {
            name: RegimeName::Strong,
            lambda: 1e-2,
            gamma: 0.5,
            ..Self::weak()
        }
    }

    pub fn named(name: RegimeName) -> Self {
        match name {
            RegimeName::Weak => Self::weak(),
            RegimeName::Medium => Self::medium(),
            RegimeName::Strong => Self::strong(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_xc > 0.0) {
            return Err(config("regime.lambda_xc", "must be positive"));
        }
        if !(self.lambda_cx > 0.0) {
            return Err(config("regime.lambda_cx", "must be positive"));
        }
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) {
            return Err(config("regime.lambda", "weights must be non-negative"));
        }
        match self.name {
            RegimeName::Weak if self.lambda != 0.0 => {
                Err(config("regime.lambda", "weak regime requires lambda = 0"))
            }
            RegimeName::Medium if self.lambda <= 0.0 => {
                Err(config("regime.lambda", "medium regime requires lambda > 0"))
            }
            RegimeName::Medium if self.gamma != 0.0 => {
                Err(config("regime.gamma", "medium regime requires gamma = 0"))
            }
            RegimeName::Strong if self.lambda <= 0.0 => {
                Err(config("regime.lambda", "strong regime requires lambda > 0"))
            }
            RegimeName::Strong if self.gamma <= 0.0 => {
                Err(config("regime.gamma", "strong regime requires gamma > 0"))
            }
            _ => Ok(()),
        }
    }

    /// The objective from already-evaluated components.
    pub fn objective(&self, recon: f64, kl: f64, con: f64) -> f64 {
        if self.lambda == 0.0 {
            return recon;
        }
        let reg = if self.gamma == 0.0 { kl } else { kl + self.gamma * con };
        recon + self.lambda * reg
    }
}
