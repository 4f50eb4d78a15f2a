use rand::Rng as _;

use super::config::FineTuneConfig;
use crate::backbone::{task_loss, BackboneModel, Batch, TaskDataset};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Tape};
use crate::rng;

/// Trains every weight of an unfrozen `model` on `data`.
pub fn fine_tune_full(model: &mut BackboneModel, data: &TaskDataset, cfg: &FineTuneConfig, seed: u64) -> Result<()> {
    if model.is_frozen() {
        return Err(Error::Invariant("full fine-tuning needs an unfrozen copy of the backbone".into()));
    }
    if data.train.is_empty() {
        return Err(Error::Empty("task dataset"));
    }
    let mut adam = Adam::new(cfg.adam, &model.weights().iter().collect::<Vec<_>>());
    let mut g = rng::stream(seed, &format!("vanilla-batches/{}", data.task_id));
    for step in 0..cfg.steps {
        let batch = Batch::new((0..cfg.batch_size).map(|_| &data.train[g.random_range(0..data.train.len())]))?;
        let mut tape = Tape::new();
        let w = model.register(&mut tape, true);
        let loss = task_loss(model, &mut tape, &w, None, &batch, cfg.lm_weight)?;
        let lv = tape.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Divergence(format!("fine-tuning loss {lv} at step {step}")));
        }
        let grads = tape.grad(loss, &w)?;
        let mut params: Vec<_> = model.weights_mut()?.iter_mut().collect();
        adam.step(&mut params, &grads);
    }
    Ok(())
}
