use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AdamConfig;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::NetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Both networks, all four terms.
    Hybrid,
    /// Segmentation network and overlap term only.
    Segnet,
    /// Registration network with similarity and smoothness terms only.
    Regnet,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Hybrid => "hybrid",
            Mode::Segnet => "segnet",
            Mode::Regnet => "regnet",
        }
    }

    pub fn uses_theta(self) -> bool {
        self != Mode::Regnet
    }

    pub fn uses_phi(self) -> bool {
        self != Mode::Segnet
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Mode::Hybrid),
            "segnet" => Ok(Mode::Segnet),
            "regnet" => Ok(Mode::Regnet),
            _ => Err(Error::Contract(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub weights: LossWeights,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub iterations: u64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (and at the end).
    pub checkpoint_every: u64,
    pub seg_net: NetConfig,
    pub reg_net: NetConfig,
    /// Foreground weight of the overlap terms; 1 is uniform.
    pub foreground_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Hybrid,
            weights: LossWeights::default(),
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            iterations: 1000,
            seed: 0,
            checkpoint_every: 100,
            seg_net: NetConfig::segmentation(0),
            reg_net: NetConfig::registration(1),
            foreground_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        self.weights.validate()?;
        if self.iterations == 0 {
            return Err(Error::Contract("iterations must be >= 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Contract("checkpoint_every must be >= 1".into()));
        }
        if !(self.foreground_weight > 0.0 && self.foreground_weight.is_finite()) {
            return Err(Error::Contract(format!(
                "foreground weight must be positive, got {}",
                self.foreground_weight
            )));
        }
        if self.mode.uses_theta() {
            self.seg_net.validate()?;
        }
        if self.mode.uses_phi() {
            self.reg_net.validate()?;
        }
        Ok(())
    }
}
