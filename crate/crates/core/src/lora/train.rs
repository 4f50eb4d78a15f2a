use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{AdapterConfig, AdapterWeights};
use crate::backbone::{task_loss, BackboneModel, Batch, TaskDataset};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Tape};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: String,
    pub steps: usize,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub loss_curve: Vec<f64>,
    /// `(step, validation accuracy)`, including step 0 and the final step.
    pub accuracy_curve: Vec<(usize, f64)>,
}

impl TaskMetrics {
    /// First recorded step whose accuracy reaches `target`.
    pub fn steps_to(&self, target: f64) -> Option<usize> {
        self.accuracy_curve.iter().find(|(_, a)| *a >= target).map(|(s, _)| *s)
    }
}

/// Trains only the adapter's `A` and `B` against `data` on a frozen model.
pub fn train_task(
    model: &BackboneModel,
    mut adapter: AdapterWeights,
    data: &TaskDataset,
    config: &AdapterConfig,
) -> Result<(AdapterWeights, TaskMetrics)> {
    if !model.is_frozen() {
        return Err(Error::Invariant("adapter training requires a frozen backbone".into()));
    }
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::Empty("task dataset"));
    }
    adapter.check_compatible(model)?;
    let initial_accuracy = model.accuracy(Some(&adapter), &data.valid)?;
    let mut accuracy_curve = vec![(0, initial_accuracy)];
    let mut loss_curve = Vec::with_capacity(config.steps);
    let mut adam = {
        let params: Vec<_> = adapter.points.iter().flat_map(|p| [&p.a, &p.b]).collect();
        Adam::new(config.adam, &params)
    };
    let mut g = rng::stream(config.seed, &format!("adapter-batches/{}", data.task_id));
    for step in 1..=config.steps {
        let batch = Batch::new((0..config.batch_size).map(|_| &data.train[g.random_range(0..data.train.len())]))?;
        let mut tape = Tape::new();
        let w = model.register(&mut tape, false);
        let vars = adapter.register(&mut tape, model, true)?;
        let loss = task_loss(model, &mut tape, &w, Some(&vars), &batch, config.lm_weight)?;
        let lv = tape.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Divergence(format!("adapter loss {lv} at step {step}")));
        }
        loss_curve.push(lv);
        let params: Vec<_> = vars.entries.iter().flat_map(|&(_, a, b)| [a, b]).collect();
        let grads = tape.grad(loss, &params)?;
        let mut targets: Vec<_> = adapter.points.iter_mut().flat_map(|p| [&mut p.a, &mut p.b]).collect();
        adam.step(&mut targets, &grads);
        if config.eval_every > 0 && step % config.eval_every == 0 && step != config.steps {
            accuracy_curve.push((step, model.accuracy(Some(&adapter), &data.valid)?));
        }
    }
    let final_accuracy = if config.steps == 0 { initial_accuracy } else { model.accuracy(Some(&adapter), &data.valid)? };
    if config.steps > 0 {
        accuracy_curve.push((config.steps, final_accuracy));
    }
    let metrics = TaskMetrics {
        task_id: data.task_id.clone(),
        steps: config.steps,
        initial_accuracy,
        final_accuracy,
        loss_curve,
        accuracy_curve,
    };
    Ok((adapter, metrics))
}
