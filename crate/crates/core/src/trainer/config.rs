use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentConfig;
use crate::error::{Error, Result};
use crate::volume::Modality;

use super::adam::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1-oct")]
    Stage1Oct,
    #[serde(rename = "1-octa")]
    Stage1Octa,
    #[serde(rename = "2")]
    Stage2,
}

impl Stage {
    pub fn code(self) -> u8 {
        match self {
            Stage::Stage1Oct => 1,
            Stage::Stage1Octa => 2,
            Stage::Stage2 => 3,
        }
    }

    pub fn for_modality(m: Modality) -> Result<Self> {
        match m {
            Modality::Oct => Ok(Stage::Stage1Oct),
            Modality::Octa => Ok(Stage::Stage1Octa),
            Modality::Oct2Octa => Err(Error::Config("stage-1 pretraining takes oct or octa".into())),
        }
    }

    /// Modality a stage-1 model reconstructs.
    pub fn modality(self) -> Option<Modality> {
        match self {
            Stage::Stage1Oct => Some(Modality::Oct),
            Stage::Stage1Octa => Some(Modality::Octa),
            Stage::Stage2 => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Stage1Oct => "1-oct",
            Stage::Stage1Octa => "1-octa",
            Stage::Stage2 => "2",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1-oct" => Ok(Stage::Stage1Oct),
            "1-octa" => Ok(Stage::Stage1Octa),
            "2" => Ok(Stage::Stage2),
            _ => Err(Error::Config(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Weight of the guidance terms in stage 2.
    pub lambda: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub commitment_weight: f64,
    /// Training crop size; `None` trains on full volumes.
    pub crop: Option<[usize; 3]>,
    /// Periodic checkpoint cadence in steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Validation cadence in steps; 0 validates only at the end.
    pub validate_every: u64,
    pub use_csa: bool,
    pub use_vsa: bool,
    pub alignment: AlignmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Stage2,
            lambda: 0.5,
            tau: 0.1,
            learning_rate: 3.0e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 1,
            epochs: 1,
            max_steps: None,
            seed: 0,
            commitment_weight: 1.0,
            crop: None,
            checkpoint_every: 0,
            validate_every: 0,
            use_csa: true,
            use_vsa: true,
            alignment: AlignmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps.is_nan()
            || self.eps <= 0.0
        {
            return Err(Error::Config("adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.commitment_weight >= 0.0 && self.commitment_weight.is_finite()) {
            return Err(Error::Config("commitment weight must be >= 0".into()));
        }
        if self.alignment.embed_dim == 0 {
            return Err(Error::Config("embedding dimension must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn steps_per_epoch(&self, n_items: usize) -> u64 {
        n_items.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, n_items: usize) -> u64 {
        self.max_steps
            .unwrap_or(self.epochs as u64 * self.steps_per_epoch(n_items))
    }

    /// True when `other` describes the same run apart from its length.
    pub fn same_run(&self, other: &TrainConfig) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        for c in [&mut a, &mut b] {
            c.epochs = 0;
            c.max_steps = None;
            c.checkpoint_every = 0;
            c.validate_every = 0;
        }
        a == b
    }
}
