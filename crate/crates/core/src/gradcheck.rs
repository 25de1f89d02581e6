//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest `|analytic - numeric| / max(1, |analytic|)` over every coordinate
/// of `point`, where `f` builds a scalar on a fresh tape from a leaf at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), eps)
}

/// Multi-input form of [`grad_check`]: every tensor in `points` becomes a leaf.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::config("grad_check eps must be positive"));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for i in 0..points[k].numel() {
            let base = points[k].data()[i];
            work[k] = with_entry(&points[k], i, base + eps);
            let plus = eval(&work)?;
            work[k] = with_entry(&points[k], i, base - eps);
            let minus = eval(&work)?;
            work[k] = points[k].clone();
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

fn with_entry(t: &Tensor, i: usize, v: f64) -> Tensor {
    let mut data = t.data().to_vec();
    data[i] = v;
    Tensor::from_parts(t.shape().to_vec(), data)
}
