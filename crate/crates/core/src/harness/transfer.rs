use serde::{Deserialize, Serialize};

use super::config::StreamConfig;
use super::stream::generate_tasks;
use crate::backbone::{BackboneModel, TaskDataset};
use crate::error::{Error, Result};
use crate::lora::{init_adapter, train_task, AdapterConfig, AdapterSnapshot, TaskMetrics};
use crate::rng;
use crate::selection::pick_warm_start;
use crate::store::Lifelong;

/// One target task trained from scratch and from a stored donor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferPair {
    pub seed: u64,
    pub source: String,
    pub target: String,
    /// Whether the target was derived from the source.
    pub related: bool,
    /// Adapter chosen by perplexity for the warm start.
    pub donor: String,
    pub scratch: TaskMetrics,
    pub warm: TaskMetrics,
    /// `target_fraction` of the scratch run's final accuracy; both curves
    /// are timed against this one bar.
    pub target_accuracy: f64,
    pub scratch_steps: Option<usize>,
    pub warm_steps: Option<usize>,
    /// Validation accuracy of the target's own adapter re-used as a warm
    /// start, before any step.
    pub self_start_accuracy: f64,
}

impl TransferPair {
    /// Warm start reached the bar in strictly fewer steps.
    pub fn warm_faster(&self) -> bool {
        match (self.warm_steps, self.scratch_steps) {
            (Some(w), Some(s)) => w < s,
            (Some(_), None) => true,
            _ => false,
        }
    }

    /// Scratch steps minus warm steps, when both reached the bar.
    pub fn steps_saved(&self) -> Option<i64> {
        Some(self.scratch_steps? as i64 - self.warm_steps? as i64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub relatedness: f64,
    pub related: Vec<TransferPair>,
    /// Negative control: the donor shares no structure with the target.
    pub unrelated: Vec<TransferPair>,
}

impl TransferReport {
    pub fn related_wins(&self) -> usize {
        self.related.iter().filter(|p| p.warm_faster()).count()
    }

    pub fn write(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("transfer.json"), serde_json::to_string_pretty(self)?)?;
        let mut w = csv::Writer::from_path(dir.join("transfer_curves.csv"))?;
        w.write_record(["seed", "kind", "arm", "step", "accuracy"])?;
        for (kind, pairs) in [("related", &self.related), ("unrelated", &self.unrelated)] {
            for p in pairs {
                for (arm, m) in [("scratch", &p.scratch), ("warm", &p.warm)] {
                    for (step, acc) in &m.accuracy_curve {
                        w.write_record([p.seed.to_string(), kind.into(), arm.into(), step.to_string(), acc.to_string()])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn probe_pair(
    model: &BackboneModel,
    adapter: &AdapterConfig,
    cfg: &StreamConfig,
    seed: u64,
    source: &AdapterSnapshot,
    target: &TaskDataset,
    related: bool,
) -> Result<TransferPair> {
    let mut life = Lifelong::new(cfg.store.clone(), source.flat.len(), adapter.scale())?;
    life.submit(source.clone())?;
    life.finalize()?;
    let store = life.into_store();
    let sample: Vec<&[usize]> = target.train.iter().take(cfg.warm_start_sample).map(|e| e.tokens.as_slice()).collect();
    let donor = pick_warm_start(&store, model, &sample)?;
    let donor_snapshot = store.fetch_adapter(&donor)?;

    let (trained, scratch) = train_task(model, init_adapter(adapter, model, None)?, target, adapter)?;
    let (_, warm) = train_task(model, init_adapter(adapter, model, Some(&donor_snapshot))?, target, adapter)?;
    let own = trained.vectorize(&target.task_id);
    let self_start_accuracy = model.accuracy(Some(&init_adapter(adapter, model, Some(&own))?), &target.valid)?;
    let target_accuracy = cfg.transfer.target_fraction * scratch.final_accuracy;
    Ok(TransferPair {
        seed,
        source: source.task_id.clone(),
        target: target.task_id.clone(),
        related,
        donor,
        scratch_steps: scratch.steps_to(target_accuracy),
        warm_steps: warm.steps_to(target_accuracy),
        scratch,
        warm,
        target_accuracy,
        self_start_accuracy,
    })
}

/// For each transfer seed, builds a related pair (the second task derived
/// from the first) plus an unrelated third task, stores the first task's
/// adapter, and trains the others both from scratch and from the donor the
/// store's perplexity ranking picks.
pub fn run_transfer_probe(model: &BackboneModel, cfg: &StreamConfig) -> Result<TransferReport> {
    cfg.validate()?;
    let rel = cfg.transfer.relatedness;
    if !(rel > 0.0 && rel <= 1.0) {
        return Err(Error::Config(format!("transfer needs relatedness in (0, 1], got {rel}")));
    }
    if cfg.transfer.eval_every == 0 {
        return Err(Error::Config("transfer curves need eval_every > 0".into()));
    }
    let mut family = cfg.family.clone();
    family.relatedness = rel;
    let mut adapter = cfg.adapter.clone();
    adapter.eval_every = cfg.transfer.eval_every;
    let mut report = TransferReport { relatedness: rel, related: Vec::new(), unrelated: Vec::new() };
    for &s in &cfg.transfer.seeds {
        let seed = rng::derive(cfg.seed, &format!("transfer/{s}"));
        let (specs, tasks) = generate_tasks(&family, 3, seed)?;
        if specs[1].parent != Some(0) || specs[2].parent.is_some() {
            return Err(Error::Invariant("transfer stream lacks the related/unrelated structure".into()));
        }
        adapter.seed = rng::derive(seed, "adapter");
        let (source, _) = train_task(model, init_adapter(&adapter, model, None)?, &tasks[0], &adapter)?;
        let source = source.vectorize(&tasks[0].task_id);
        report.related.push(probe_pair(model, &adapter, cfg, s, &source, &tasks[1], true)?);
        report.unrelated.push(probe_pair(model, &adapter, cfg, s, &source, &tasks[2], false)?);
    }
    Ok(report)
}
