//! Finite-difference gradient oracle and a sampled Lipschitz lower bound.

use ndarray::{Array1, ArrayView2};

use super::params::GradVector;
use crate::error::{LabError, Result};

/// Central-difference estimate of `grad loss(params)`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], step: f64) -> Result<GradVector>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(LabError::Domain(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = loss(&p);
        p[i] = orig - step;
        let down = loss(&p);
        p[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    Ok(GradVector::new(grad))
}

/// Largest observed slope `|V(s1) - V(s2)| / ||s1 - s2||` over all sample pairs.
///
/// This is a lower bound on the true Lipschitz constant. Pairs at zero
/// distance are skipped.
pub fn lipschitz_estimate<F>(value: F, states: ArrayView2<f64>) -> Result<f64>
where
    F: Fn(ArrayView2<f64>) -> Array1<f64>,
{
    if states.nrows() < 2 {
        return Err(LabError::Domain("lipschitz estimate needs at least two samples".into()));
    }
    let v = value(states);
    let mut best: f64 = 0.0;
    for i in 0..states.nrows() {
        for j in (i + 1)..states.nrows() {
            let d = (&states.row(i) - &states.row(j)).mapv(|x| x * x).sum().sqrt();
            if d == 0.0 {
                continue;
            }
            best = best.max((v[i] - v[j]).abs() / d);
        }
    }
    Ok(best)
}
