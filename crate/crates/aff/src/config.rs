//! The TOML run configuration. Every table rejects unknown keys and every
//! key has a default, so `config dump-defaults` prints a complete file.

use std::fs;
use std::path::Path;

use aff_core::retrieval::Protocol;
use aff_core::synth::GenSpec;
use aff_core::train::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Cut-off for mAP@k; 0 ranks the whole gallery.
    pub top_k: usize,
    /// Protocols `eval` runs when none is given on the command line.
    pub protocols: Vec<Protocol>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            top_k: 0,
            protocols: vec![Protocol::Symmetric, Protocol::Asymmetric, Protocol::Ensemble],
        }
    }
}

impl EvalConfig {
    pub fn top_k(&self) -> Option<usize> {
        (self.top_k > 0).then_some(self.top_k)
    }
}

/// Knobs of the ablation studies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Pure noise families appended in the noise study.
    pub noise_families: usize,
    pub noise_dim: usize,
    pub noise_sigma: f64,
    /// `α` values of the momentum study.
    pub momentum: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            noise_families: 2,
            noise_dim: 32,
            noise_sigma: 1.0,
            momentum: vec![0.0, 0.5, 0.9, 0.99, 0.999],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: GenSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let a = &self.ablation;
        if a.noise_dim < 2 || !(a.noise_sigma > 0.0) {
            return Err(Error::Config("noise families need noise_dim ≥ 2 and noise_sigma > 0".into()));
        }
        if a.momentum.is_empty() || a.momentum.iter().any(|m| !(0.0..1.0).contains(m)) {
            return Err(Error::Config("ablation momentum values must lie in [0, 1)".into()));
        }
        if self.eval.protocols.is_empty() {
            return Err(Error::Config("eval.protocols is empty".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Config::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// `load` for an optional path, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Config> {
        path.map_or_else(|| Ok(Config::default()), Config::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configs always serialize")
    }

    /// The same configuration with the data and training seeds set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Config {
        let mut c = self.clone();
        c.data.seed = seed;
        c.train.seed = seed;
        c
    }
}
