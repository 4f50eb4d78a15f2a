use serde::{Deserialize, Serialize};

use super::config::StreamConfig;
use super::report::{mean, spearman};
use super::run::generate_stream;
use crate::backbone::{BackboneModel, Example};
use crate::cae::{train_cae_observed, CaeModel};
use crate::error::{Error, Result};
use crate::lora::{init_adapter, train_task, AdapterSnapshot};

/// One checkpoint of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Training step, or `None` for the original adapters.
    pub step: Option<usize>,
    /// Mean reconstruction score over the adapters.
    pub score: f64,
    pub min_score: f64,
    /// Mean test accuracy of the decoded adapters.
    pub accuracy: f64,
    pub per_task: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub task_ids: Vec<String>,
    /// Checkpoints in training order.
    pub rows: Vec<SweepRow>,
    /// Original adapters, score 1.
    pub baseline: SweepRow,
    /// Rank correlation of score and accuracy over `rows`.
    pub spearman: Option<f64>,
}

impl SweepReport {
    /// Distinct 0.05-wide score buckets in `[0.5, 1]` covered by `rows`.
    pub fn buckets(&self) -> usize {
        let mut b: Vec<i64> =
            self.rows.iter().filter(|r| (0.5..=1.0).contains(&r.score)).map(|r| ((r.score - 0.5) / 0.05).floor().min(9.0) as i64).collect();
        b.sort_unstable();
        b.dedup();
        b.len()
    }

    pub fn write(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(self)?)?;
        let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
        w.write_record(["step", "score", "min_score", "accuracy", "baseline_accuracy"])?;
        for r in self.rows.iter().chain(std::iter::once(&self.baseline)) {
            w.write_record([
                r.step.map_or_else(|| "original".to_string(), |s| s.to_string()),
                r.score.to_string(),
                r.min_score.to_string(),
                r.accuracy.to_string(),
                self.baseline.accuracy.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn evaluate(model: &BackboneModel, snapshots: &[AdapterSnapshot], tests: &[(String, Vec<Example>)], scale: f64) -> Result<Vec<f64>> {
    snapshots.iter().zip(tests).map(|(s, (_, ex))| model.accuracy(Some(&s.to_weights(scale)?), ex)).collect()
}

/// Trains a fresh autoencoder on `adapters` and, each time the mean score
/// first reaches one of the configured levels, decodes every adapter and
/// measures its accuracy on the matching test split.
pub fn run_fidelity_sweep(
    model: &BackboneModel,
    adapters: &[AdapterSnapshot],
    tests: &[(String, Vec<Example>)],
    cfg: &StreamConfig,
) -> Result<SweepReport> {
    if adapters.is_empty() || adapters.len() != tests.len() {
        return Err(Error::Config(format!("{} adapters for {} test splits", adapters.len(), tests.len())));
    }
    if let Some((a, (t, _))) = adapters.iter().zip(tests).find(|(a, (t, _))| a.task_id != *t) {
        return Err(Error::Config(format!("adapter {} paired with test split {t}", a.task_id)));
    }
    let mut levels = cfg.sweep.levels.clone();
    levels.sort_by(f64::total_cmp);
    let top = *levels.last().ok_or(Error::Empty("sweep levels"))?;
    let scale = cfg.adapter.scale();
    let mut cae_cfg = cfg.store.cae.clone();
    cae_cfg.check_every = 1;
    cae_cfg.max_steps = cfg.sweep.max_steps;
    cae_cfg.threshold = top.min(cae_cfg.threshold);
    cae_cfg.stop_score = Some(top.max(cae_cfg.threshold));
    let fresh = CaeModel::new(cae_cfg, adapters[0].flat.len())?;

    let originals = evaluate(model, adapters, tests, scale)?;
    let baseline = SweepRow { step: None, score: 1.0, min_score: 1.0, accuracy: mean(&originals), per_task: originals };

    let mut rows = Vec::new();
    let mut next = 0;
    let mut failure = None;
    let outcome = train_cae_observed(&fresh, adapters, |step, cae, min| {
        if failure.is_some() || next == levels.len() {
            return;
        }
        let scored: Result<Vec<(AdapterSnapshot, f64)>> = adapters
            .iter()
            .map(|a| {
                let code = cae.encode(a)?;
                let score = code.score.expect("fresh codes carry scores");
                Ok((cae.decode(&code, &a.layout)?, score))
            })
            .collect();
        let scored = match scored {
            Ok(s) => s,
            Err(e) => return failure = Some(e),
        };
        let score = mean(&scored.iter().map(|(_, s)| *s).collect::<Vec<_>>());
        if score < levels[next] {
            return;
        }
        while next < levels.len() && score >= levels[next] {
            next += 1;
        }
        let decoded: Vec<AdapterSnapshot> = scored.into_iter().map(|(d, _)| d).collect();
        match evaluate(model, &decoded, tests, scale) {
            Ok(per_task) => rows.push(SweepRow { step: Some(step), score, min_score: min, accuracy: mean(&per_task), per_task }),
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    match outcome {
        Ok(_) | Err(Error::ThresholdUnreachable { .. }) => {}
        Err(e) => return Err(e),
    }
    let spearman = spearman(&rows.iter().map(|r| r.score).collect::<Vec<_>>(), &rows.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    Ok(SweepReport { task_ids: tests.iter().map(|(t, _)| t.clone()).collect(), rows, baseline, spearman })
}

/// Trains one adapter per task of the configured stream, independently,
/// and returns them with their test splits.
pub fn train_stream_adapters(model: &BackboneModel, cfg: &StreamConfig) -> Result<(Vec<AdapterSnapshot>, Vec<(String, Vec<Example>)>)> {
    let (_, stream) = generate_stream(cfg)?;
    let mut adapters = Vec::with_capacity(stream.len());
    let mut tests = Vec::with_capacity(stream.len());
    for (i, mut data) in stream.into_iter().enumerate() {
        let ctx = |e: Error| e.in_task(i, &data.task_id);
        let (a, _) = train_task(model, init_adapter(&cfg.adapter, model, None).map_err(ctx)?, &data, &cfg.adapter).map_err(ctx)?;
        adapters.push(a.vectorize(&data.task_id));
        tests.push((data.task_id.clone(), data.take_test()));
    }
    Ok((adapters, tests))
}
