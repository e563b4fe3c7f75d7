//! The robust value-aware loss and its pathwise gradient.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::uncertainty::{min_value_targets, UncertaintySetSpec};
use super::value::{draw_value_noise, ValueFunction};
use crate::dynamics::{GaussianMember, TransitionBatch};
use crate::error::{shape_err, LabError, Result};
use crate::nn::GradVector;
use crate::rng::normal_matrix;

/// Frozen randomness of one RVL evaluation. Row `i * k_mc + j` of the noise
/// matrices belongs to batch row `i`, Monte-Carlo draw `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct RvlDraws {
    pub targets: Array1<f64>,
    pub model_noise: Array2<f64>,
    pub value_noise: Array2<f64>,
    pub k_mc: usize,
}

/// Robust targets from the dataset next states plus the reparameterisation
/// and value noise for the model term.
pub fn draw_rvl<R: Rng + ?Sized>(
    value: &dyn ValueFunction,
    batch: &TransitionBatch,
    spec: &UncertaintySetSpec,
    k_mc: usize,
    rng: &mut R,
) -> Result<RvlDraws> {
    if k_mc == 0 {
        return Err(LabError::Domain("k_mc must be >= 1".into()));
    }
    let targets = min_value_targets(value, batch.next_states.view(), spec, rng)?;
    let rows = batch.len() * k_mc;
    let model_noise = normal_matrix(rng, rows, batch.states.ncols());
    let value_noise = draw_value_noise(value, rows, rng);
    Ok(RvlDraws {
        targets,
        model_noise,
        value_noise,
        k_mc,
    })
}

fn repeat_rows(m: &Array2<f64>, k: usize) -> Array2<f64> {
    let idx: Vec<usize> = (0..m.nrows()).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    m.select(Axis(0), &idx)
}

/// `mean_i (mean_j V(s^_ij) - target_i)^2` at frozen draws, with its gradient
/// in the member's parameters. The value function is held constant.
pub fn rvl_loss_with(
    member: &GaussianMember,
    value: &dyn ValueFunction,
    batch: &TransitionBatch,
    draws: &RvlDraws,
) -> Result<(f64, GradVector)> {
    let n = batch.len();
    let k = draws.k_mc;
    if n == 0 {
        return Err(LabError::Domain("batch must be non-empty".into()));
    }
    if draws.targets.len() != n || draws.model_noise.nrows() != n * k {
        return Err(shape_err("RVL draws do not match the batch"));
    }
    let s = repeat_rows(&batch.states, k);
    let a = repeat_rows(&batch.actions, k);
    let (sp, rc) = member.sample_with_noise(s.view(), a.view(), draws.model_noise.view())?;
    let (v, dv_ds) = value.eval_with_state_grad(sp.view(), draws.value_noise.view())?;
    let mut loss = 0.0;
    let mut coef = Array1::zeros(n * k);
    for i in 0..n {
        let pred = v.slice(ndarray::s![i * k..(i + 1) * k]).sum() / k as f64;
        let diff = pred - draws.targets[i];
        loss += diff * diff;
        for j in 0..k {
            coef[i * k + j] = 2.0 * diff / (n * k) as f64;
        }
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(LabError::Divergence(format!("RVL loss is {loss}")));
    }
    let upstream = &dv_ds * &coef.insert_axis(Axis(1));
    let grad = member.reparam_backward(&rc, upstream.view())?;
    Ok((loss, grad))
}

pub fn rvl_loss<R: Rng + ?Sized>(
    member: &GaussianMember,
    value: &dyn ValueFunction,
    batch: &TransitionBatch,
    spec: &UncertaintySetSpec,
    k_mc: usize,
    rng: &mut R,
) -> Result<(f64, GradVector)> {
    let draws = draw_rvl(value, batch, spec, k_mc, rng)?;
    rvl_loss_with(member, value, batch, &draws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_diff_grad, ParamVector};
    use crate::rng::seeded;
    use crate::rvl::uncertainty::Metric;
    use crate::rvl::value::{FnValue, LinearValue};
    use ndarray::array;

    fn floor_variance_member(state_dim: usize, action_dim: usize, delta: &[f64]) -> GaussianMember {
        let spec = GaussianMember::spec(state_dim, action_dim, vec![]).unwrap();
        let mut p = ParamVector::zeros(&spec);
        let n = p.len();
        let k = state_dim;
        for (j, d) in delta.iter().enumerate() {
            p.as_mut_slice()[n - 2 * k + j] = *d;
        }
        for j in 0..k {
            p.as_mut_slice()[n - k + j] = -100.0;
        }
        GaussianMember::from_params(state_dim, action_dim, vec![], p).unwrap()
    }

    #[test]
    fn exact_model_zero_radius_gives_zero_loss() {
        let m = floor_variance_member(1, 1, &[0.0]);
        let mut z = normal_matrix(&mut seeded(0), 1, 1);
        z[[0, 0]] = 0.0;
        let batch = TransitionBatch::new(array![[0.4]], array![[0.0]], array![[0.4]]).unwrap();
        let v = LinearValue {
            weights: vec![1.0],
            bias: 0.0,
        };
        let spec = UncertaintySetSpec::new(0.0, 1, Metric::EuclideanBall, true).unwrap();
        let mut draws = draw_rvl(&v, &batch, &spec, 1, &mut seeded(1)).unwrap();
        draws.model_noise = z;
        assert_eq!(rvl_loss_with(&m, &v, &batch, &draws).unwrap().0, 0.0);
    }

    #[test]
    fn linear_value_quarter_loss() {
        // model mean 1 with vanishing variance, robust target fixed at 0.5
        let m = floor_variance_member(1, 1, &[1.0]);
        let batch = TransitionBatch::new(array![[0.0]], array![[0.0]], array![[1.0]]).unwrap();
        let v = LinearValue {
            weights: vec![1.0],
            bias: 0.0,
        };
        let draws = RvlDraws {
            targets: array![0.5],
            model_noise: array![[0.3]],
            value_noise: Array2::zeros((1, 0)),
            k_mc: 1,
        };
        let (loss, _) = rvl_loss_with(&m, &v, &batch, &draws).unwrap();
        // residual variance at the clamp floor moves the sample by at most sigma_min * |z|
        let sigma_min = (0.5 * crate::dynamics::MIN_LOG_VAR).exp();
        assert!((loss.sqrt() - 0.5).abs() <= sigma_min * 0.3 + 1e-12);
        assert!((loss - 0.25).abs() < 3e-3);
    }

    #[test]
    fn gradient_matches_finite_differences_at_frozen_noise() {
        let m = GaussianMember::init(2, 1, vec![6, 6], &mut seeded(2)).unwrap();
        let mut rng = seeded(3);
        let batch = TransitionBatch::new(
            normal_matrix(&mut rng, 5, 2),
            normal_matrix(&mut rng, 5, 1),
            normal_matrix(&mut rng, 5, 2),
        )
        .unwrap();
        let v = FnValue {
            dim: 2,
            value: |s: &[f64]| (s[0] * 1.3).sin() - 0.4 * s[1] * s[1],
            grad: |s: &[f64]| vec![1.3 * (s[0] * 1.3).cos(), -0.8 * s[1]],
        };
        let spec = UncertaintySetSpec::new(0.3, 6, Metric::EuclideanBall, true).unwrap();
        let draws = draw_rvl(&v, &batch, &spec, 3, &mut rng).unwrap();
        let (_, g) = rvl_loss_with(&m, &v, &batch, &draws).unwrap();
        let fd = finite_diff_grad(
            |p| rvl_loss_with(&m.with_params(p).unwrap(), &v, &batch, &draws).unwrap().0,
            m.params(),
            1e-5,
        )
        .unwrap();
        assert!(g.relative_error(&fd) <= 1e-4, "{}", g.relative_error(&fd));
    }

    #[test]
    fn zero_radius_reduces_to_value_aware_loss() {
        let m = GaussianMember::init(2, 1, vec![4], &mut seeded(4)).unwrap();
        let mut rng = seeded(5);
        let batch = TransitionBatch::new(
            normal_matrix(&mut rng, 4, 2),
            normal_matrix(&mut rng, 4, 1),
            normal_matrix(&mut rng, 4, 2),
        )
        .unwrap();
        let v = LinearValue {
            weights: vec![0.7, -1.1],
            bias: 0.2,
        };
        let spec = UncertaintySetSpec::new(0.0, 1, Metric::EuclideanBall, true).unwrap();
        let draws = draw_rvl(&v, &batch, &spec, 1, &mut rng).unwrap();
        let (loss, _) = rvl_loss_with(&m, &v, &batch, &draws).unwrap();
        let (sp, _) = m
            .sample_with_noise(batch.states.view(), batch.actions.view(), draws.model_noise.view())
            .unwrap();
        let none = Array2::zeros((4, 0));
        let vm = v.eval(sp.view(), none.view()).unwrap();
        let vt = v.eval(batch.next_states.view(), none.view()).unwrap();
        let expect = (&vm - &vt).mapv(|d| d * d).mean().unwrap();
        assert!((loss - expect).abs() < 1e-12);
    }
}
