//! Per-task LoRA adapters: configuration, initialization, training, and
//! flattening into fixed-width snapshots.

mod snapshot;
mod train;

pub use snapshot::{AdapterSnapshot, LayoutEntry, Matrix, SnapshotLayout};
pub use train::{train_task, TaskMetrics};

use serde::{Deserialize, Serialize};

use crate::backbone::{task_loss, AdapterVars, Batch, BackboneModel, InjectionPoint, Projection};
use crate::numerics::gradcheck::{check_gradients, GradCheckReport};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, Tape, Tensor};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub points: Vec<InjectionPoint>,
    /// The `BA` product is scaled by `alpha / rank`; unset means
    /// `alpha = rank`, i.e. unit scale.
    pub alpha: Option<f64>,
    pub adam: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lm_weight: f64,
    /// Standard deviation of the random `A` initialization.
    pub init_std: f64,
    /// Validation accuracy is recorded every `eval_every` steps (0: never).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 2,
            points: AdapterConfig::default_points(2),
            alpha: None,
            adam: AdamConfig::with_lr(1e-2),
            steps: 300,
            batch_size: 32,
            lm_weight: 1.0,
            init_std: 0.02,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl AdapterConfig {
    /// Query and value projections of every block.
    pub fn query_value_points(num_blocks: usize) -> Vec<InjectionPoint> {
        (0..num_blocks)
            .flat_map(|b| [InjectionPoint::new(b, Projection::Query), InjectionPoint::new(b, Projection::Value)])
            .collect()
    }

    /// Value projection of every block plus the last block's FFN output.
    pub fn default_points(num_blocks: usize) -> Vec<InjectionPoint> {
        let mut points: Vec<_> = (0..num_blocks).map(|b| InjectionPoint::new(b, Projection::Value)).collect();
        if num_blocks > 0 {
            points.push(InjectionPoint::new(num_blocks - 1, Projection::FfnDown));
        }
        points
    }

    pub fn scale(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64) / self.rank as f64
    }

    /// Checks rank and injection points against `model`: every point must
    /// exist and satisfy `rank <= min(d, k) / 4`.
    pub fn validate(&self, model: &BackboneModel) -> Result<()> {
        if self.rank == 0 || self.points.is_empty() {
            return Err(Error::Config("adapter needs rank >= 1 and at least one injection point".into()));
        }
        let mut seen = self.points.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.points.len() {
            return Err(Error::Config("duplicate injection point".into()));
        }
        for &p in &self.points {
            let (d, k) = model.injection_shape(p)?;
            if self.rank * 4 > d.min(k) {
                return Err(Error::Config(format!("rank {} too large for {} ({d}x{k}); need r <= min(d,k)/4", self.rank, p.name())));
            }
        }
        Ok(())
    }

    /// Flattened length `Σ r(d + k)` for `model`.
    pub fn snapshot_len(&self, model: &BackboneModel) -> Result<usize> {
        self.points.iter().map(|&p| model.injection_shape(p).map(|(d, k)| self.rank * (d + k))).sum()
    }
}

/// `A: [r × k]`, `B: [d × r]` for one injection point.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPoint {
    pub point: InjectionPoint,
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterWeights {
    pub rank: usize,
    pub scale: f64,
    pub points: Vec<AdapterPoint>,
}

impl AdapterWeights {
    pub fn param_count(&self) -> usize {
        self.points.iter().map(|p| p.a.len() + p.b.len()).sum()
    }

    pub fn check_compatible(&self, model: &BackboneModel) -> Result<()> {
        for p in &self.points {
            let (d, k) = model.injection_shape(p.point)?;
            if p.a.dims() != (self.rank, k) || p.b.dims() != (d, self.rank) {
                return Err(Error::Layout(format!(
                    "{}: adapter A{:?}/B{:?} incompatible with projection {d}x{k}",
                    p.point.name(),
                    p.a.shape(),
                    p.b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Finite-difference audit of the task loss's gradient with respect to
    /// every `A` and `B`, on `coords` random coordinates.
    pub fn check_loss_gradients(&self, model: &BackboneModel, batch: &Batch, lm_weight: f64, coords: usize, seed: u64) -> Result<GradCheckReport> {
        self.check_compatible(model)?;
        let params: Vec<Tensor> = self.points.iter().flat_map(|p| [p.a.clone(), p.b.clone()]).collect();
        check_gradients(
            &params,
            |tape, v| {
                let w = model.register(tape, false);
                let entries = self.points.iter().enumerate().map(|(i, p)| (p.point, v[2 * i], v[2 * i + 1])).collect();
                task_loss(model, tape, &w, Some(&AdapterVars { entries, scale: self.scale }), batch, lm_weight)
            },
            coords,
            1e-5,
            seed,
        )
    }

    pub(crate) fn register(&self, tape: &mut Tape, model: &BackboneModel, trainable: bool) -> Result<AdapterVars> {
        self.check_compatible(model)?;
        let mut leaf = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let entries = self.points.iter().map(|p| (p.point, leaf(&p.a), leaf(&p.b))).collect();
        Ok(AdapterVars { entries, scale: self.scale })
    }

    /// Dense `ΔW = scale · B A` for one point.
    pub fn delta(&self, point: InjectionPoint) -> Option<Tensor> {
        let p = self.points.iter().find(|p| p.point == point)?;
        Some(p.b.matmul(&p.a).expect("adapter shapes").scale(self.scale))
    }
}

/// Fresh adapter (`A` random, `B = 0`), or the weights of `warm_start`.
pub fn init_adapter(config: &AdapterConfig, model: &BackboneModel, warm_start: Option<&AdapterSnapshot>) -> Result<AdapterWeights> {
    config.validate(model)?;
    if let Some(snap) = warm_start {
        let w = snap.devectorize(config)?;
        w.check_compatible(model)?;
        return Ok(w);
    }
    let mut g = rng::stream(config.seed, "adapter-init");
    let points = config
        .points
        .iter()
        .map(|&point| {
            let (d, k) = model.injection_shape(point)?;
            Ok(AdapterPoint {
                point,
                a: Tensor::raw(vec![config.rank, k], rng::normal_vec(&mut g, config.rank * k, config.init_std)),
                b: Tensor::zeros(d, config.rank),
            })
        })
        .collect::<Result<_>>()?;
    Ok(AdapterWeights { rank: config.rank, scale: config.scale(), points })
}
