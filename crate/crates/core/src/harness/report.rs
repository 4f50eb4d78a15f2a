use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::StreamConfig;
use crate::backbone::PretrainReport;
use crate::error::Result;
use crate::lora::TaskMetrics;
use crate::store::{FlushEvent, StorageReport};

/// Accuracy matrix of one method: `acc[i][j]` is accuracy on task `j` after
/// learning task `i`, populated only for `j ≤ i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub name: String,
    pub acc: Vec<Vec<f64>>,
    pub average_accuracy: f64,
    /// Best accuracy ever reached on a task minus its final accuracy.
    pub forgetting: Vec<f64>,
}

impl MethodReport {
    pub fn new(name: &str, acc: Vec<Vec<f64>>) -> MethodReport {
        let average_accuracy = acc.last().map_or(0.0, |row| mean(row));
        let forgetting = forgetting(&acc);
        MethodReport { name: name.to_string(), acc, average_accuracy, forgetting }
    }

    pub fn final_row(&self) -> &[f64] {
        self.acc.last().map_or(&[], |r| r.as_slice())
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per task: maximum accuracy over the rows where it appears minus the
/// last row's accuracy.
pub fn forgetting(acc: &[Vec<f64>]) -> Vec<f64> {
    let Some(last) = acc.last() else { return Vec::new() };
    (0..last.len())
        .map(|j| {
            let best = acc[j..].iter().map(|row| row[j]).fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .collect()
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either side is constant or the
/// lengths differ.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub adapters_secs: f64,
    pub cae_secs: f64,
    pub evaluation_secs: f64,
    pub vanilla_secs: f64,
    pub total_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: String,
    /// Original adapter, task id given, right after training.
    pub post_training_accuracy: f64,
    /// Decoded adapter, task id given, after the store is final.
    pub decoded_accuracy: f64,
    /// Routed accuracy after the last task.
    pub final_accuracy: f64,
    pub forgetting: f64,
    /// `post_training_accuracy − final_accuracy`.
    pub post_training_drop: f64,
    pub reconstruction_score: f64,
    pub routing_accuracy: f64,
    /// Stored task the adapter was initialized from, if any.
    pub warm_start_from: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: StreamConfig,
    /// Position of each trained task in the generated stream.
    pub order: Vec<usize>,
    pub task_ids: Vec<String>,
    pub backbone_checksum: String,
    pub cola: MethodReport,
    pub adapter_style: Option<MethodReport>,
    pub vanilla: Option<MethodReport>,
    pub tasks: Vec<TaskRow>,
    pub routing_accuracy: f64,
    pub storage: StorageReport,
    pub cae_events: Vec<FlushEvent>,
    pub adapter_training: Vec<TaskMetrics>,
    pub timings: Timings,
}

impl RunReport {
    /// The report with wall-clock fields zeroed, for comparing runs.
    pub fn without_timings(&self) -> RunReport {
        RunReport { timings: Timings::default(), ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<RunReport> {
        Ok(serde_json::from_str(text)?)
    }

    /// `report.json`, `accuracy.csv` (one row per populated cell and
    /// method) and `tasks.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json())?;
        let mut w = csv::Writer::from_path(dir.join("accuracy.csv"))?;
        w.write_record(["method", "after_task", "task", "accuracy"])?;
        for m in [Some(&self.cola), self.adapter_style.as_ref(), self.vanilla.as_ref()].into_iter().flatten() {
            for (i, row) in m.acc.iter().enumerate() {
                for (j, a) in row.iter().enumerate() {
                    w.write_record([m.name.as_str(), &self.task_ids[i], &self.task_ids[j], &a.to_string()])?;
                }
            }
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("tasks.csv"))?;
        for t in &self.tasks {
            w.serialize(t)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Several runs over different task orders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiRunReport {
    pub pretrain: Option<PretrainReport>,
    pub runs: Vec<RunReport>,
    pub cola_average_accuracy: f64,
    pub adapter_style_average_accuracy: Option<f64>,
    pub vanilla_average_accuracy: Option<f64>,
    pub routing_accuracy: f64,
}

impl MultiRunReport {
    pub fn new(pretrain: Option<PretrainReport>, runs: Vec<RunReport>) -> MultiRunReport {
        let avg = |f: &dyn Fn(&RunReport) -> Option<f64>| {
            let v: Option<Vec<f64>> = runs.iter().map(f).collect();
            v.map(|v| mean(&v))
        };
        MultiRunReport {
            cola_average_accuracy: avg(&|r| Some(r.cola.average_accuracy)).unwrap_or(0.0),
            adapter_style_average_accuracy: avg(&|r| r.adapter_style.as_ref().map(|m| m.average_accuracy)),
            vanilla_average_accuracy: avg(&|r| r.vanilla.as_ref().map(|m| m.average_accuracy)),
            routing_accuracy: avg(&|r| Some(r.routing_accuracy)).unwrap_or(0.0),
            pretrain,
            runs,
        }
    }

    pub fn without_timings(&self) -> MultiRunReport {
        MultiRunReport { runs: self.runs.iter().map(RunReport::without_timings).collect(), ..self.clone() }
    }

    /// `summary.json` plus one subdirectory per run.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(self)?)?;
        for (i, r) in self.runs.iter().enumerate() {
            r.write(&dir.join(format!("run{i}")))?;
        }
        Ok(())
    }
}
