use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{task_loss, Batch, BackboneConfig, BackboneModel, TaskDataset};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Tape};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lm_weight: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { steps: 1500, batch_size: 32, adam: AdamConfig::with_lr(3e-3), lm_weight: 1.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_curve: Vec<f64>,
}

/// Trains a fresh backbone on `corpus` and freezes it.
///
/// Fails unless the mean loss over the last 50 steps is at most half the
/// first step's loss.
pub fn pretrain(config: &BackboneConfig, corpus: &TaskDataset, cfg: &PretrainConfig) -> Result<(BackboneModel, PretrainReport)> {
    if corpus.train.is_empty() {
        return Err(Error::Empty("pretraining corpus"));
    }
    if cfg.steps == 0 {
        return Err(Error::Config("refusing to freeze an untrained backbone (steps = 0)".into()));
    }
    let mut model = BackboneModel::init(config.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.adam, &model.weights.iter().collect::<Vec<_>>());
    let mut g = rng::stream(cfg.seed, "pretrain-batches");
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = Batch::new((0..cfg.batch_size).map(|_| &corpus.train[g.random_range(0..corpus.train.len())]))?;
        let mut tape = Tape::new();
        let w = model.register(&mut tape, true);
        let loss = task_loss(&model, &mut tape, &w, None, &batch, cfg.lm_weight)?;
        let lv = tape.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Divergence(format!("pretraining loss {lv} at step {step}")));
        }
        curve.push(lv);
        let grads = tape.grad(loss, &w)?;
        let mut params: Vec<_> = model.weights.iter_mut().collect();
        adam.step(&mut params, &grads);
    }
    let tail = &curve[curve.len().saturating_sub(50)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
    let initial = curve[0];
    if final_loss > 0.5 * initial {
        return Err(Error::InsufficientDecrease { initial, last: final_loss });
    }
    model.freeze();
    Ok((model, PretrainReport { initial_loss: initial, final_loss, loss_curve: curve }))
}
