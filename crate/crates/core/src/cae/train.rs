use serde::{Deserialize, Serialize};

use super::{CaeModel, Dense, Mlp};
use crate::error::{Error, Result};
use crate::lora::AdapterSnapshot;
use crate::numerics::{Adam, Tape};
use crate::rng;

use super::Normalizer;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaeReport {
    pub steps: usize,
    pub loss_curve: Vec<f64>,
    /// `(step, minimum reconstruction score over the population)`.
    pub score_curve: Vec<(usize, f64)>,
    pub min_score: f64,
}

/// Trains until every snapshot in `population` reconstructs with cosine at
/// least the configured stop score (by default the threshold), starting
/// from `model`'s weights.
///
/// Scores are measured on the f32-rounded model, which is what gets
/// returned. A model whose encoder was discarded gets a fresh encoder.
pub fn train_cae(model: &CaeModel, population: &[AdapterSnapshot]) -> Result<(CaeModel, CaeReport)> {
    train_cae_observed(model, population, |_, _, _| {})
}

/// [`train_cae`], calling `observe(step, rounded_model, min_score)` at every
/// reconstruction check, including step 0.
pub fn train_cae_observed(
    model: &CaeModel,
    population: &[AdapterSnapshot],
    mut observe: impl FnMut(usize, &CaeModel, f64),
) -> Result<(CaeModel, CaeReport)> {
    if population.is_empty() {
        return Err(Error::Empty("autoencoder population"));
    }
    let flats: Vec<&[f64]> = population.iter().map(|s| s.flat.as_slice()).collect();
    for f in &flats {
        model.check_width(f)?;
    }
    let cfg = model.config.clone();
    let mut m = model.clone();
    if m.encoder.is_none() {
        let fresh = CaeModel::new(cfg.clone(), m.input_width)?;
        let mut g = rng::stream(cfg.seed, "cae-reinit");
        // Keep the fresh encoder's shape but draw new weights so a second
        // phase does not replay the first phase's initialization.
        let layers = fresh
            .encoder
            .expect("fresh model has an encoder")
            .layers
            .iter()
            .map(|l| Dense::init(l.w.rows(), l.w.cols(), l.activation, &mut g))
            .collect();
        m.encoder = Some(Mlp { layers });
    }
    m.set_normalizer(Normalizer::fit(&flats, cfg.standardize)?);

    let mut report = CaeReport::default();
    let mut best = f64::NEG_INFINITY;
    let mut adam = Adam::new(cfg.adam, &m.params());
    for step in 0..=cfg.max_steps {
        if step % cfg.check_every == 0 || step == cfg.max_steps {
            let rounded = m.rounded();
            let mut min = f64::INFINITY;
            for f in &flats {
                min = min.min(rounded.reconstruction_score(f)?);
            }
            report.score_curve.push((step, min));
            observe(step, &rounded, min);
            best = best.max(min);
            if min >= cfg.stop_at() {
                report.steps = step;
                report.min_score = min;
                return Ok((rounded, report));
            }
        }
        if step == cfg.max_steps {
            break;
        }
        let mut tape = Tape::new();
        let vars = m.register(&mut tape, true)?;
        let loss = m.loss_tape(&mut tape, &vars, &flats, cfg.lambda)?;
        let lv = tape.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Divergence(format!("autoencoder loss {lv} at step {step}")));
        }
        report.loss_curve.push(lv);
        let grads = tape.grad(loss, &vars)?;
        adam.step(&mut m.params_mut(), &grads);
    }
    Err(Error::ThresholdUnreachable { threshold: cfg.stop_at(), steps: cfg.max_steps, best })
}
