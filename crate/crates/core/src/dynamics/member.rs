//! A single conditional-Gaussian dynamics model predicting state deltas.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LabError, Result};
use crate::mdp::Transition;
use crate::nn::{Activation, ForwardCache, GradVector, Mlp, NetSpec, OutputTransform, ParamVector};
use crate::rng::normal_vec;

pub const MIN_LOG_VAR: f64 = -10.0;
pub const MAX_LOG_VAR: f64 = 4.0;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Column-stacked transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub next_states: Array2<f64>,
}

impl TransitionBatch {
    pub fn new(states: Array2<f64>, actions: Array2<f64>, next_states: Array2<f64>) -> Result<Self> {
        let n = states.nrows();
        if actions.nrows() != n || next_states.nrows() != n || next_states.ncols() != states.ncols() {
            return Err(shape_err("transition batch arrays disagree in shape"));
        }
        Ok(TransitionBatch {
            states,
            actions,
            next_states,
        })
    }

    pub fn from_transitions(batch: &[Transition]) -> Result<Self> {
        if batch.is_empty() {
            return Err(LabError::Domain("batch must be non-empty".into()));
        }
        let (s, a, sp) = crate::mdp::batch_arrays(batch);
        TransitionBatch::new(s, a, sp)
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean and clamped log-variance of `T(s' | s, a)` for every row.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: Array2<f64>,
    pub log_var: Array2<f64>,
}

/// Everything needed to push a gradient through `s' = mu + sigma * z`.
#[derive(Clone, Debug)]
pub struct ReparamCache {
    cache: ForwardCache,
    noise: Array2<f64>,
    log_var: Array2<f64>,
}

impl ReparamCache {
    pub fn noise(&self) -> &Array2<f64> {
        &self.noise
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMember {
    pub net: Mlp,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl GaussianMember {
    pub fn spec(state_dim: usize, action_dim: usize, hidden: Vec<usize>) -> Result<NetSpec> {
        NetSpec::new(
            state_dim + action_dim,
            state_dim,
            hidden,
            Activation::Swish,
            OutputTransform::GaussianHead {
                min_log_var: MIN_LOG_VAR,
                max_log_var: MAX_LOG_VAR,
            },
        )
    }

    pub fn init<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: Vec<usize>, rng: &mut R) -> Result<Self> {
        let net = Mlp::init(Self::spec(state_dim, action_dim, hidden)?, rng)?;
        Ok(GaussianMember {
            net,
            state_dim,
            action_dim,
        })
    }

    pub fn from_params(state_dim: usize, action_dim: usize, hidden: Vec<usize>, params: ParamVector) -> Result<Self> {
        let net = Mlp::new(Self::spec(state_dim, action_dim, hidden)?, params)?;
        Ok(GaussianMember {
            net,
            state_dim,
            action_dim,
        })
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    pub fn params(&self) -> &[f64] {
        self.net.params.as_slice()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params.as_mut_slice()
    }

    /// Copy with the given flat parameters.
    pub fn with_params(&self, values: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.net.params = self.net.params.with_values(values.to_vec())?;
        Ok(out)
    }

    fn inputs(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        if s.ncols() != self.state_dim || a.ncols() != self.action_dim || s.nrows() != a.nrows() {
            return Err(shape_err(format!(
                "dynamics input {:?} / {:?}, expected state dim {} and action dim {}",
                s.dim(),
                a.dim(),
                self.state_dim,
                self.action_dim
            )));
        }
        Ok(concatenate(Axis(1), &[s.view(), a.view()]).expect("row counts checked"))
    }

    fn split(&self, s: ArrayView2<f64>, out: &Array2<f64>) -> Prediction {
        let k = self.state_dim;
        Prediction {
            mean: &s + &out.slice(s![.., ..k]),
            log_var: out.slice(s![.., k..]).to_owned(),
        }
    }

    pub fn predict(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Prediction> {
        let out = self.net.forward(self.inputs(s, a)?.view())?;
        Ok(self.split(s, &out))
    }

    fn predict_cached(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<(Prediction, ForwardCache)> {
        let (out, cache) = self.net.forward_cached(self.inputs(s, a)?.view())?;
        Ok((self.split(s, &out), cache))
    }

    /// `log N(s'; mu, diag(sigma^2))` per row.
    pub fn log_prob(&self, batch: &TransitionBatch) -> Result<Array1<f64>> {
        let p = self.predict(batch.states.view(), batch.actions.view())?;
        Ok(row_log_prob(&p, &batch.next_states))
    }

    /// Pathwise sample `s' = mu + sigma * z` for caller-supplied noise `z`.
    pub fn sample_with_noise(
        &self,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        noise: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, ReparamCache)> {
        if noise.dim() != s.dim() {
            return Err(shape_err("noise must match the state batch"));
        }
        let (p, cache) = self.predict_cached(s, a)?;
        let mut next = p.mean.clone();
        next.zip_mut_with(&(p.log_var.mapv(|lv| (0.5 * lv).exp()) * &noise), |x, d| *x += d);
        Ok((
            next,
            ReparamCache {
                cache,
                noise: noise.to_owned(),
                log_var: p.log_var,
            },
        ))
    }

    /// Gradient of `sum(upstream * s')` with respect to the parameters,
    /// holding the reparameterisation noise fixed.
    pub fn reparam_backward(&self, rc: &ReparamCache, upstream: ArrayView2<f64>) -> Result<GradVector> {
        let k = self.state_dim;
        if upstream.dim() != rc.noise.dim() {
            return Err(shape_err("upstream must match the sampled batch"));
        }
        let mut up = Array2::zeros((upstream.nrows(), 2 * k));
        up.slice_mut(s![.., ..k]).assign(&upstream);
        let dlv = Array2::from_shape_fn(upstream.dim(), |(i, j)| {
            upstream[[i, j]] * rc.noise[[i, j]] * 0.5 * (0.5 * rc.log_var[[i, j]]).exp()
        });
        up.slice_mut(s![.., k..]).assign(&dlv);
        Ok(self.net.backward(&rc.cache, up.view())?.0)
    }

    /// Directional derivative `<direction, grad_psi log T(s'_i | s_i, a_i)>` for every row.
    pub fn log_prob_directional(&self, batch: &TransitionBatch, direction: &[f64]) -> Result<Vec<f64>> {
        let input = self.inputs(batch.states.view(), batch.actions.view())?;
        let (out, dout) = self.net.jvp(input.view(), direction)?;
        let p = self.split(batch.states.view(), &out);
        let up = log_prob_output_grad(&p, &batch.next_states, None);
        Ok((&up * &dout).sum_axis(Axis(1)).to_vec())
    }
}

fn row_log_prob(p: &Prediction, next: &Array2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(next.nrows());
    for i in 0..next.nrows() {
        let mut acc = 0.0;
        for j in 0..next.ncols() {
            let d = next[[i, j]] - p.mean[[i, j]];
            let lv = p.log_var[[i, j]];
            acc += d * d * (-lv).exp() + lv + LN_2PI;
        }
        out[i] = -0.5 * acc;
    }
    out
}

/// d(sum_i c_i log p_i)/d(network output), with `c_i = 1` when `coef` is absent.
fn log_prob_output_grad(p: &Prediction, next: &Array2<f64>, coef: Option<&[f64]>) -> Array2<f64> {
    let (n, k) = next.dim();
    let mut g = Array2::zeros((n, 2 * k));
    for i in 0..n {
        let c = coef.map_or(1.0, |c| c[i]);
        for j in 0..k {
            let d = next[[i, j]] - p.mean[[i, j]];
            let inv_var = (-p.log_var[[i, j]]).exp();
            g[[i, j]] = c * d * inv_var;
            g[[i, k + j]] = c * 0.5 * (d * d * inv_var - 1.0);
        }
    }
    g
}

/// Mean Gaussian negative log-likelihood and its parameter gradient.
pub fn nll_loss(member: &GaussianMember, batch: &TransitionBatch) -> Result<(f64, GradVector)> {
    weighted_nll(member, batch, &vec![1.0; batch.len()])
}

/// `mean_i w_i * (-log T(s'_i | s_i, a_i))` and its parameter gradient.
pub fn weighted_nll(member: &GaussianMember, batch: &TransitionBatch, weights: &[f64]) -> Result<(f64, GradVector)> {
    let n = batch.len();
    if n == 0 {
        return Err(LabError::Domain("batch must be non-empty".into()));
    }
    if weights.len() != n {
        return Err(shape_err(format!("{} weights for {} rows", weights.len(), n)));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0)) {
        return Err(LabError::Domain(format!("weights must be positive, got {w}")));
    }
    let (p, cache) = member.predict_cached(batch.states.view(), batch.actions.view())?;
    let lp = row_log_prob(&p, &batch.next_states);
    let loss = -lp.iter().zip(weights).map(|(l, w)| w * l).sum::<f64>() / n as f64;
    if !loss.is_finite() {
        return Err(LabError::Divergence(format!("dynamics NLL is {loss}")));
    }
    let coef: Vec<f64> = weights.iter().map(|w| -w / n as f64).collect();
    let up = log_prob_output_grad(&p, &batch.next_states, Some(&coef));
    let (grad, _) = member.net.backward(&cache, up.view())?;
    Ok((loss, grad))
}

/// Exact `grad_psi log N(s'; mu_psi(s, a), sigma^2_psi(s, a))` for one transition.
pub fn log_prob_grad(member: &GaussianMember, s: &[f64], a: &[f64], sp: &[f64]) -> Result<GradVector> {
    let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row");
    let batch = TransitionBatch::new(row(s), row(a), row(sp))?;
    let (p, cache) = member.predict_cached(batch.states.view(), batch.actions.view())?;
    let up = log_prob_output_grad(&p, &batch.next_states, None);
    Ok(member.net.backward(&cache, up.view())?.0)
}

/// Draw `s' = mu + sigma * z` for one `(s, a)`. The noise is always returned;
/// with `reparameterized` set the caller may differentiate through it via
/// [`GaussianMember::sample_with_noise`].
pub fn sample_next<R: Rng + ?Sized>(
    member: &GaussianMember,
    s: &[f64],
    a: &[f64],
    rng: &mut R,
    reparameterized: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let _ = reparameterized;
    let z = normal_vec(rng, member.state_dim);
    let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).map_err(|e| shape_err(e.to_string()));
    let (next, _) = member.sample_with_noise(row(s)?.view(), row(a)?.view(), row(&z)?.view())?;
    Ok((next.row(0).to_vec(), z))
}

/// Plain-descent rate that keeps `rate * |g| <= max_step`.
pub fn step_rate(lr: f64, grad_norm: f64, max_step: Option<f64>) -> f64 {
    match max_step {
        Some(c) if lr * grad_norm > c => c / grad_norm,
        _ => lr,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_grad;
    use crate::rng::{normal_matrix, seeded};
    use ndarray::array;

    fn member(seed: u64) -> GaussianMember {
        GaussianMember::init(2, 1, vec![6, 5], &mut seeded(seed)).unwrap()
    }

    fn batch(seed: u64, n: usize) -> TransitionBatch {
        let mut rng = seeded(seed);
        TransitionBatch::new(normal_matrix(&mut rng, n, 2), normal_matrix(&mut rng, n, 1), normal_matrix(&mut rng, n, 2))
            .unwrap()
    }

    fn identity_unit_variance() -> GaussianMember {
        let spec = GaussianMember::spec(3, 1, vec![4]).unwrap();
        GaussianMember::from_params(3, 1, vec![4], ParamVector::zeros(&spec)).unwrap()
    }

    #[test]
    fn nll_at_mean_with_unit_variance() {
        let m = identity_unit_variance();
        let s = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let b = TransitionBatch::new(s.clone(), array![[0.0], [1.0]], s).unwrap();
        let (loss, _) = nll_loss(&m, &b).unwrap();
        assert!((loss - 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let m = member(1);
        let b = batch(2, 5);
        let (_, g) = nll_loss(&m, &b).unwrap();
        let fd = finite_diff_grad(|p| nll_loss(&m.with_params(p).unwrap(), &b).unwrap().0, m.params(), 1e-5).unwrap();
        assert!(g.relative_error(&fd) <= 1e-5, "{}", g.relative_error(&fd));
    }

    #[test]
    fn weighted_nll_gradient_matches_finite_differences() {
        let m = member(3);
        let b = batch(4, 4);
        let w = [0.5, 1.7, 2.0, 0.9];
        let (_, g) = weighted_nll(&m, &b, &w).unwrap();
        let fd = finite_diff_grad(|p| weighted_nll(&m.with_params(p).unwrap(), &b, &w).unwrap().0, m.params(), 1e-5)
            .unwrap();
        assert!(g.relative_error(&fd) <= 1e-5);
    }

    #[test]
    fn unit_weights_equal_plain_nll() {
        let m = member(5);
        let b = batch(6, 7);
        let (l1, g1) = nll_loss(&m, &b).unwrap();
        let (l2, g2) = weighted_nll(&m, &b, &[1.0; 7]).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn weights_scale_row_losses() {
        let m = member(7);
        let b = batch(8, 2);
        let ell = -m.log_prob(&b).unwrap();
        let (l, _) = weighted_nll(&m, &b, &[2.0, 0.5]).unwrap();
        assert!((l - (2.0 * ell[0] + 0.5 * ell[1]) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_rows_leave_mean_loss_unchanged() {
        let m = member(9);
        let b = batch(10, 3);
        let dup = TransitionBatch::new(
            concatenate![Axis(0), b.states, b.states],
            concatenate![Axis(0), b.actions, b.actions],
            concatenate![Axis(0), b.next_states, b.next_states],
        )
        .unwrap();
        let (l1, _) = nll_loss(&m, &b).unwrap();
        let (l2, _) = nll_loss(&m, &dup).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_weight_rejected() {
        let m = member(1);
        let b = batch(1, 2);
        assert!(matches!(weighted_nll(&m, &b, &[1.0, 0.0]), Err(LabError::Domain(_))));
        assert!(matches!(weighted_nll(&m, &b, &[1.0]), Err(LabError::Shape(_))));
    }

    #[test]
    fn log_prob_grad_matches_finite_differences() {
        let m = member(11);
        let (s, a, sp) = ([0.3, -0.2], [0.7], [0.1, 0.4]);
        let g = log_prob_grad(&m, &s, &a, &sp).unwrap();
        let b = TransitionBatch::new(array![[0.3, -0.2]], array![[0.7]], array![[0.1, 0.4]]).unwrap();
        let fd = finite_diff_grad(|p| m.with_params(p).unwrap().log_prob(&b).unwrap()[0], m.params(), 1e-5).unwrap();
        assert!(g.relative_error(&fd) <= 1e-5);
    }

    #[test]
    fn mean_head_gradient_vanishes_at_mean() {
        // hidden-free member: mean head weights are the first 3x2 block plus the first two biases.
        let mut m = GaussianMember::init(2, 1, vec![], &mut seeded(12)).unwrap();
        m.params_mut()[..].iter_mut().for_each(|v| *v *= 0.5);
        let p = m.predict(array![[0.3, 0.1]].view(), array![[0.2]].view()).unwrap();
        let g = log_prob_grad(&m, &[0.3, 0.1], &[0.2], &[p.mean[[0, 0]], p.mean[[0, 1]]]).unwrap();
        // weight matrix is 3x4 row-major: columns 0,1 are the mean outputs.
        for r in 0..3 {
            assert_eq!(g.as_slice()[r * 4], 0.0);
            assert_eq!(g.as_slice()[r * 4 + 1], 0.0);
        }
        assert_eq!(g.as_slice()[12], 0.0);
        assert_eq!(g.as_slice()[13], 0.0);
        assert!(g.as_slice()[14] != 0.0);
    }

    #[test]
    fn larger_variance_shrinks_quadratic_score() {
        // d/dmu log N = (s' - mu) / sigma^2
        let score = |lv: f64| {
            let p = Prediction {
                mean: array![[0.0]],
                log_var: array![[lv]],
            };
            log_prob_output_grad(&p, &array![[0.8]], None)[[0, 0]].abs()
        };
        assert!(score(0.5) < score(0.0));
        assert!((score(0.0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_returns_mean() {
        let m = member(13);
        let s = array![[0.2, 0.1]];
        let a = array![[-0.3]];
        let p = m.predict(s.view(), a.view()).unwrap();
        let (next, _) = m.sample_with_noise(s.view(), a.view(), Array2::zeros((1, 2)).view()).unwrap();
        assert_eq!(next, p.mean);
    }

    #[test]
    fn floor_variance_sample_is_near_mean() {
        let spec = GaussianMember::spec(2, 1, vec![]).unwrap();
        let mut params = ParamVector::zeros(&spec);
        // log-variance biases far below the clamp floor
        let n = params.len();
        params.as_mut_slice()[n - 2..].iter_mut().for_each(|v| *v = -50.0);
        let m = GaussianMember::from_params(2, 1, vec![], params).unwrap();
        let (sp, z) = sample_next(&m, &[1.0, 2.0], &[0.0], &mut seeded(1), true).unwrap();
        let sigma_min = (0.5 * MIN_LOG_VAR).exp();
        assert!((sp[0] - 1.0).abs() <= sigma_min * z[0].abs() + 1e-15);
        assert!((sp[1] - 2.0).abs() <= sigma_min * z[1].abs() + 1e-15);
    }

    #[test]
    fn sample_mean_within_clt_band() {
        let m = member(14);
        let s = array![[0.5, -0.5]];
        let a = array![[0.25]];
        let p = m.predict(s.view(), a.view()).unwrap();
        let n = 100_000;
        let mut rng = seeded(15);
        let z = normal_matrix(&mut rng, n, 2);
        let (next, _) = m
            .sample_with_noise(
                s.broadcast((n, 2)).unwrap(),
                a.broadcast((n, 1)).unwrap(),
                z.view(),
            )
            .unwrap();
        let mean = next.mean_axis(Axis(0)).unwrap();
        for j in 0..2 {
            let se = (0.5 * p.log_var[[0, j]]).exp() / (n as f64).sqrt();
            assert!((mean[j] - p.mean[[0, j]]).abs() <= 4.0 * se);
        }
    }

    #[test]
    fn pathwise_gradient_matches_finite_differences() {
        let m = member(16);
        let b = batch(17, 4);
        let z = normal_matrix(&mut seeded(18), 4, 2);
        let f = |mm: &GaussianMember| {
            let (next, _) = mm.sample_with_noise(b.states.view(), b.actions.view(), z.view()).unwrap();
            next.mapv(|x| (x * 0.7).sin()).sum() / 4.0
        };
        let (next, rc) = m.sample_with_noise(b.states.view(), b.actions.view(), z.view()).unwrap();
        let up = next.mapv(|x| 0.7 * (x * 0.7).cos() / 4.0);
        let g = m.reparam_backward(&rc, up.view()).unwrap();
        let fd = finite_diff_grad(|p| f(&m.with_params(p).unwrap()), m.params(), 1e-5).unwrap();
        assert!(g.relative_error(&fd) <= 1e-4);
    }

    #[test]
    fn directional_log_prob_matches_full_gradient() {
        let m = member(19);
        let b = batch(20, 3);
        let dir = normal_vec(&mut seeded(21), m.num_params());
        let dots = m.log_prob_directional(&b, &dir).unwrap();
        for i in 0..3 {
            let g = log_prob_grad(
                &m,
                b.states.row(i).as_slice().unwrap(),
                b.actions.row(i).as_slice().unwrap(),
                b.next_states.row(i).as_slice().unwrap(),
            )
            .unwrap();
            let expect: f64 = g.as_slice().iter().zip(&dir).map(|(x, y)| x * y).sum();
            assert!((dots[i] - expect).abs() <= 1e-10 * (1.0 + expect.abs()));
        }
    }
}
