use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stream::FamilyConfig;
use crate::backbone::{BackboneConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::lora::AdapterConfig;
use crate::numerics::AdamConfig;
use crate::rng;
use crate::store::StoreConfig;

/// Full fine-tuning of every backbone weight, task after task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lm_weight: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig { steps: 300, batch_size: 32, adam: AdamConfig::with_lr(1e-3), lm_weight: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Baselines {
    pub vanilla: bool,
    pub adapter_style: bool,
}

impl Default for Baselines {
    fn default() -> Self {
        Baselines { vanilla: true, adapter_style: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    /// Fraction of keyword-class pairs a derived task keeps.
    pub relatedness: f64,
    pub seeds: Vec<u64>,
    /// Validation checks every this many steps.
    pub eval_every: usize,
    /// Fraction of final accuracy that counts as "reached".
    pub target_fraction: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig { relatedness: 0.75, seeds: vec![0, 1, 2, 3, 4], eval_every: 5, target_fraction: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Score levels; the first checkpoint reaching each level is kept.
    pub levels: Vec<f64>,
    pub max_steps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            levels: vec![0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.93, 0.95, 0.97, 0.98, 0.99, 0.995, 0.999],
            max_steps: 3000,
        }
    }
}

/// Everything that defines one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub tasks: usize,
    pub seed: u64,
    pub family: FamilyConfig,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub corpus_size: usize,
    pub adapter: AdapterConfig,
    pub store: StoreConfig,
    /// Initialize each new adapter from the best-scoring stored one.
    pub warm_start: bool,
    pub warm_start_sample: usize,
    pub baselines: Baselines,
    pub vanilla: FineTuneConfig,
    /// One run per seed, each over its own task permutation.
    pub order_seeds: Vec<u64>,
    pub transfer: TransferConfig,
    pub sweep: SweepConfig,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            tasks: 10,
            seed: 0,
            family: FamilyConfig::default(),
            backbone: BackboneConfig::default(),
            pretrain: PretrainConfig::default(),
            corpus_size: 4000,
            adapter: AdapterConfig::default(),
            store: StoreConfig::default(),
            warm_start: false,
            warm_start_sample: 32,
            baselines: Baselines::default(),
            vanilla: FineTuneConfig::default(),
            order_seeds: vec![0, 1, 2, 3, 4],
            transfer: TransferConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl StreamConfig {
    /// Sets the master seed and derives every component seed from it.
    pub fn with_seed(mut self, seed: u64) -> StreamConfig {
        self.seed = seed;
        self.pretrain.seed = rng::derive(seed, "pretrain");
        self.adapter.seed = rng::derive(seed, "adapter");
        self.store.cae.seed = rng::derive(seed, "cae");
        self
    }

    pub fn from_toml(text: &str) -> Result<StreamConfig> {
        let cfg: StreamConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<StreamConfig> {
        StreamConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks < 2 {
            return Err(Error::Config(format!("a stream needs at least 2 tasks, got {}", self.tasks)));
        }
        if self.backbone.vocab_size != self.family.vocab_size {
            return Err(Error::Config("backbone and task family disagree on vocabulary size".into()));
        }
        if self.backbone.num_classes != self.family.num_classes {
            return Err(Error::Config("backbone and task family disagree on class count".into()));
        }
        if self.family.seq_len > self.backbone.max_seq_len {
            return Err(Error::Config("sequences are longer than the backbone's context".into()));
        }
        self.backbone.validate()?;
        self.family.validate(self.tasks)
    }
}
