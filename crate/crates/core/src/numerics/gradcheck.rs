//! Central finite-difference gradient checking.
//!
//! The reference derivative only ever evaluates the forward pass, so it is
//! independent of the backward rules it checks.

use rand::Rng as _;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(param, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error with a small absolute floor so coordinates whose true
/// derivative is ~0 compare on absolute terms.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn eval<F>(params: &[Tensor], loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    tape.value(loss).item()
}

/// Compares taped gradients of `loss_fn` against central differences with
/// step `h` on `coords` randomly chosen coordinates across `params`.
pub fn check_gradients<F>(params: &[Tensor], loss_fn: F, coords: usize, h: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.grad(loss, &vars)?;
    drop(tape);

    let total: usize = params.iter().map(Tensor::len).sum();
    let mut g = rng::stream(seed, "gradcheck");
    let mut work = params.to_vec();
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    for _ in 0..coords.min(total) {
        let mut flat = g.random_range(0..total);
        let mut pi = 0;
        while flat >= params[pi].len() {
            flat -= params[pi].len();
            pi += 1;
        }
        let orig = work[pi].data()[flat];
        work[pi].data_mut()[flat] = orig + h;
        let up = eval(&work, &loss_fn)?;
        work[pi].data_mut()[flat] = orig - h;
        let down = eval(&work, &loss_fn)?;
        work[pi].data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[pi].data()[flat];
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((pi, flat, analytic, numeric));
        }
    }
    Ok(report)
}
