//! One-step inner weighted-MLE update and the implicit outer gradient.

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::weighting::WeightingNet;
use crate::dynamics::{step_rate, weighted_nll, GaussianMember, TransitionBatch};
use crate::error::{LabError, Result};
use crate::nn::{GradVector, Optimizer, OptimizerKind};
use crate::rvl::{draw_rvl, rvl_loss_with, RvlDraws, UncertaintySetSpec, ValueFunction};

/// What the outer step needs from the inner step it is paired with.
#[derive(Clone, Debug)]
pub struct InnerRecord {
    pub step: u64,
    pub batch: TransitionBatch,
    pub weights: Array1<f64>,
    pub beta1: f64,
    pub params_before: Vec<f64>,
    pub params_after: Vec<f64>,
    pub inner_loss: f64,
    pub inner_grad_norm: f64,
}

/// `psi' = psi - beta1 * grad_psi L_WSL(psi, nu)` with plain gradient descent.
pub fn inner_step(
    member: &GaussianMember,
    weighting: &WeightingNet,
    batch: &TransitionBatch,
    beta1: f64,
    step: u64,
) -> Result<(GaussianMember, InnerRecord)> {
    inner_step_capped(member, weighting, batch, beta1, None, step)
}

/// [`inner_step`] with the step rate `beta1(t) = step_rate(beta1, |g|, max_step)`.
/// The record stores the rate actually used.
pub fn inner_step_capped(
    member: &GaussianMember,
    weighting: &WeightingNet,
    batch: &TransitionBatch,
    beta1: f64,
    max_step: Option<f64>,
    step: u64,
) -> Result<(GaussianMember, InnerRecord)> {
    if !(beta1 >= 0.0) {
        return Err(LabError::Domain(format!("inner learning rate must be >= 0, got {beta1}")));
    }
    let weights = weighting.weights(batch)?;
    let (loss, grad) = weighted_nll(member, batch, weights.as_slice().expect("contiguous"))?;
    if !grad.is_finite() {
        return Err(LabError::Divergence("inner gradient is not finite".into()));
    }
    let beta1 = step_rate(beta1, grad.norm(), max_step);
    let after: Vec<f64> = member
        .params()
        .iter()
        .zip(grad.as_slice())
        .map(|(p, g)| p - beta1 * g)
        .collect();
    let updated = member.with_params(&after)?;
    Ok((
        updated,
        InnerRecord {
            step,
            batch: batch.clone(),
            weights,
            beta1,
            params_before: member.params().to_vec(),
            params_after: after,
            inner_loss: loss,
            inner_grad_norm: grad.norm(),
        },
    ))
}

#[derive(Clone, Debug)]
pub struct OuterResult {
    pub grad: GradVector,
    pub outer_loss: f64,
    /// Per-row `h_i = beta1 * <grad_psi L_RVL(psi'), grad_psi log T_psi(s'_i | s_i, a_i)>`.
    pub h: Vec<f64>,
}

/// Gradient of `nu -> L_RVL(psi - beta1 grad_psi L_WSL(psi, nu))` through the
/// single inner step, with `psi` itself held fixed.
///
/// `outer_batch` and `draws` define the RVL evaluation at the updated
/// parameters.
pub fn outer_implicit_grad(
    cached: &InnerRecord,
    member_after: &GaussianMember,
    value: &dyn ValueFunction,
    outer_batch: &TransitionBatch,
    draws: &RvlDraws,
    weighting: &WeightingNet,
    expected_step: u64,
) -> Result<OuterResult> {
    if cached.step != expected_step {
        return Err(LabError::Pairing(format!(
            "inner record from step {} used at step {expected_step}",
            cached.step
        )));
    }
    if member_after.params() != cached.params_after.as_slice() {
        return Err(LabError::Pairing("member parameters differ from the inner step's output".into()));
    }
    let (outer_loss, g_rvl) = rvl_loss_with(member_after, value, outer_batch, draws)?;
    let before = member_after.with_params(&cached.params_before)?;
    let dots = before.log_prob_directional(&cached.batch, g_rvl.as_slice())?;
    let n = dots.len() as f64;
    let h: Vec<f64> = dots.iter().map(|d| cached.beta1 * d).collect();
    let (_, cache) = weighting.weights_cached(&cached.batch)?;
    let coef = Array1::from_iter(h.iter().map(|hi| hi / n));
    let grad = weighting.weighted_param_grad(&cache, &coef)?;
    if !grad.is_finite() {
        return Err(LabError::Divergence("outer gradient is not finite".into()));
    }
    Ok(OuterResult { grad, outer_loss, h })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterBatch {
    /// Evaluate L_RVL on the inner step's batch.
    Same,
    /// Evaluate L_RVL on a separately supplied batch.
    Fresh,
}

#[derive(Clone, Debug)]
pub struct BilevelState {
    pub beta1: f64,
    pub beta2: f64,
    pub step_counter: u64,
    pub rvl_spec: UncertaintySetSpec,
    pub k_mc: usize,
    pub outer_batch: OuterBatch,
    /// Upper bound on the inner step length `|psi' - psi|`.
    pub max_step: Option<f64>,
    outer_opt: Optimizer,
    pub min_outer_grad_sq: f64,
    pub min_inner_grad_sq: f64,
}

impl BilevelState {
    pub fn new(beta1: f64, beta2: f64, rvl_spec: UncertaintySetSpec, k_mc: usize, outer_kind: OptimizerKind, num_nu: usize) -> Result<Self> {
        if !(beta1 > 0.0) || !(beta2 > 0.0) {
            return Err(LabError::Domain(format!("learning rates must be positive: {beta1}, {beta2}")));
        }
        rvl_spec.validate()?;
        Ok(BilevelState {
            beta1,
            beta2,
            step_counter: 0,
            rvl_spec,
            k_mc: k_mc.max(1),
            outer_batch: OuterBatch::Same,
            max_step: None,
            outer_opt: Optimizer::new(outer_kind, beta2, num_nu),
            min_outer_grad_sq: f64::INFINITY,
            min_inner_grad_sq: f64::INFINITY,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub step: u64,
    pub inner_loss: f64,
    pub outer_loss: f64,
    pub outer_grad_norm: f64,
    pub inner_grad_norm: f64,
    pub weight_mean: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    pub min_outer_grad_sq: f64,
    pub min_inner_grad_sq: f64,
}

/// One inner step on `member` followed by one outer step on `weighting`.
/// `fresh_batch` is used for the outer loss when the state asks for it.
pub fn bilevel_round<R: Rng + ?Sized>(
    member: &mut GaussianMember,
    weighting: &mut WeightingNet,
    value: &dyn ValueFunction,
    batch: &TransitionBatch,
    fresh_batch: Option<&TransitionBatch>,
    state: &mut BilevelState,
    rng: &mut R,
) -> Result<RoundRecord> {
    let step = state.step_counter;
    let (after, record) = inner_step_capped(member, weighting, batch, state.beta1, state.max_step, step)?;
    let outer_batch = match (state.outer_batch, fresh_batch) {
        (OuterBatch::Fresh, Some(b)) => b,
        (OuterBatch::Fresh, None) => return Err(LabError::Config("outer batch mode is fresh but no batch was given".into())),
        (OuterBatch::Same, _) => batch,
    };
    let draws = draw_rvl(value, outer_batch, &state.rvl_spec, state.k_mc, rng)?;
    let outer = outer_implicit_grad(&record, &after, value, outer_batch, &draws, weighting, step)?;
    state.outer_opt.step(weighting.params_mut(), &outer.grad)?;
    *member = after;
    state.step_counter += 1;
    let g = outer.grad.norm();
    state.min_outer_grad_sq = state.min_outer_grad_sq.min(g * g);
    state.min_inner_grad_sq = state.min_inner_grad_sq.min(record.inner_grad_norm.powi(2));
    let w = &record.weights;
    Ok(RoundRecord {
        step,
        inner_loss: record.inner_loss,
        outer_loss: outer.outer_loss,
        outer_grad_norm: g,
        inner_grad_norm: record.inner_grad_norm,
        weight_mean: w.mean().unwrap_or(f64::NAN),
        weight_min: w.iter().cloned().fold(f64::INFINITY, f64::min),
        weight_max: w.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        min_outer_grad_sq: state.min_outer_grad_sq,
        min_inner_grad_sq: state.min_inner_grad_sq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::nll_loss;
    use crate::nn::{finite_diff_grad, ParamVector};
    use crate::rng::{normal_matrix, seeded};
    use crate::rvl::{FnValue, LinearValue, Metric};
    use ndarray::array;

    fn batch(seed: u64, n: usize) -> TransitionBatch {
        let mut rng = seeded(seed);
        TransitionBatch::new(normal_matrix(&mut rng, n, 2), normal_matrix(&mut rng, n, 1), normal_matrix(&mut rng, n, 2))
            .unwrap()
    }

    fn unit_weighting() -> WeightingNet {
        let mut w = WeightingNet::init(2, 1, vec![3], (1.0, 1.0), &mut seeded(0)).unwrap();
        w.params_mut().iter_mut().for_each(|p| *p = 0.0);
        w
    }

    #[test]
    fn unit_weights_reproduce_mle_step() {
        let m = GaussianMember::init(2, 1, vec![5], &mut seeded(1)).unwrap();
        let b = batch(2, 6);
        let (after, _) = inner_step(&m, &unit_weighting(), &b, 0.01, 0).unwrap();
        let (_, g) = nll_loss(&m, &b).unwrap();
        for ((a, p), gi) in after.params().iter().zip(m.params()).zip(g.as_slice()) {
            assert_eq!(*a, p - 0.01 * gi);
        }
    }

    #[test]
    fn capped_step_has_bounded_length() {
        let m = GaussianMember::init(2, 1, vec![5], &mut seeded(1)).unwrap();
        let b = batch(2, 6);
        let (_, g) = nll_loss(&m, &b).unwrap();
        let cap = 0.5 * g.norm();
        let (after, rec) = inner_step_capped(&m, &unit_weighting(), &b, 1.0, Some(cap), 0).unwrap();
        let len: f64 = after.params().iter().zip(m.params()).map(|(a, p)| (a - p).powi(2)).sum::<f64>().sqrt();
        assert!((len - cap).abs() < 1e-12 * cap.max(1.0));
        assert!((rec.beta1 - 0.5).abs() < 1e-15);
        let (loose, _) = inner_step_capped(&m, &unit_weighting(), &b, 0.01, Some(cap), 0).unwrap();
        let (plain, _) = inner_step(&m, &unit_weighting(), &b, 0.01, 0).unwrap();
        assert_eq!(loose.params(), plain.params());
    }

    #[test]
    fn zero_inner_rate_keeps_params() {
        let m = GaussianMember::init(2, 1, vec![5], &mut seeded(1)).unwrap();
        let w = WeightingNet::init(2, 1, vec![4], (0.5, 2.0), &mut seeded(3)).unwrap();
        let (after, _) = inner_step(&m, &w, &batch(2, 4), 0.0, 0).unwrap();
        assert_eq!(after.params(), m.params());
    }

    #[test]
    fn inner_step_matches_hand_gradient() {
        // hidden-free member on (s, a) in R x R: mean = s + w_s s + w_a a + b_m,
        // log_var = v_s s + v_a a + b_v.
        let spec = GaussianMember::spec(1, 1, vec![]).unwrap();
        let theta = vec![0.2, -0.1, 0.4, 0.3, 0.05, -0.2];
        let m = GaussianMember::from_params(1, 1, vec![], ParamVector::new(theta.clone(), spec.manifest()).unwrap()).unwrap();
        let (s, a, sp) = (0.5, -1.0, 1.2);
        let b = TransitionBatch::new(array![[s]], array![[a]], array![[sp]]).unwrap();
        let mut wnet = WeightingNet::init(1, 1, vec![2], (1.7, 1.7), &mut seeded(0)).unwrap();
        wnet.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let w = 1.7;
        // layout: weight rows (s, a) x cols (mean, log_var), then biases
        let (ws, wv_s, wa, wv_a, bm, bv) = (theta[0], theta[1], theta[2], theta[3], theta[4], theta[5]);
        let mu = s + ws * s + wa * a + bm;
        let lv = wv_s * s + wv_a * a + bv;
        let d = sp - mu;
        let g_mu = -w * d * (-lv).exp();
        let g_lv = w * 0.5 * (1.0 - d * d * (-lv).exp());
        let hand = [s * g_mu, s * g_lv, a * g_mu, a * g_lv, g_mu, g_lv];
        let beta = 0.05;
        let (after, _) = inner_step(&m, &wnet, &b, beta, 0).unwrap();
        for i in 0..6 {
            assert!((after.params()[i] - (theta[i] - beta * hand[i])).abs() < 1e-14);
        }
    }

    fn outer_setup() -> (GaussianMember, WeightingNet, TransitionBatch, FnValue<impl Fn(&[f64]) -> f64, impl Fn(&[f64]) -> Vec<f64>>) {
        let m = GaussianMember::init(2, 1, vec![4], &mut seeded(10)).unwrap();
        let w = WeightingNet::init(2, 1, vec![3], (0.5, 2.0), &mut seeded(11)).unwrap();
        let v = FnValue {
            dim: 2,
            value: |s: &[f64]| (s[0] * 0.9).sin() + 0.3 * s[1] * s[1],
            grad: |s: &[f64]| vec![0.9 * (s[0] * 0.9).cos(), 0.6 * s[1]],
        };
        (m, w, batch(12, 6), v)
    }

    #[test]
    fn outer_gradient_matches_finite_differences() {
        let (m, w, b, v) = outer_setup();
        let beta1 = 0.2;
        let spec = UncertaintySetSpec::new(0.2, 5, Metric::EuclideanBall, true).unwrap();
        let draws = draw_rvl(&v, &b, &spec, 2, &mut seeded(13)).unwrap();
        let (after, rec) = inner_step(&m, &w, &b, beta1, 7).unwrap();
        let res = outer_implicit_grad(&rec, &after, &v, &b, &draws, &w, 7).unwrap();
        let fd = finite_diff_grad(
            |nu| {
                let wn = w.with_params(nu).unwrap();
                let (a2, _) = inner_step(&m, &wn, &b, beta1, 7).unwrap();
                rvl_loss_with(&a2, &v, &b, &draws).unwrap().0
            },
            w.params(),
            1e-5,
        )
        .unwrap();
        assert!(res.grad.relative_error(&fd) <= 1e-4, "{}", res.grad.relative_error(&fd));
    }

    #[test]
    fn zero_inner_rate_gives_zero_outer_gradient() {
        let (m, w, b, v) = outer_setup();
        let spec = UncertaintySetSpec::default();
        let draws = draw_rvl(&v, &b, &spec, 1, &mut seeded(1)).unwrap();
        let (after, rec) = inner_step(&m, &w, &b, 0.0, 0).unwrap();
        let res = outer_implicit_grad(&rec, &after, &v, &b, &draws, &w, 0).unwrap();
        assert!(res.grad.as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn constant_value_gives_zero_outer_gradient() {
        // grad_psi L_RVL vanishes, so it is orthogonal to every log-prob gradient
        let (m, w, b, _) = outer_setup();
        let v = LinearValue {
            weights: vec![0.0, 0.0],
            bias: 2.0,
        };
        let draws = draw_rvl(&v, &b, &UncertaintySetSpec::default(), 1, &mut seeded(1)).unwrap();
        let (after, rec) = inner_step(&m, &w, &b, 0.1, 0).unwrap();
        let res = outer_implicit_grad(&rec, &after, &v, &b, &draws, &w, 0).unwrap();
        assert!(res.h.iter().all(|h| *h == 0.0));
        assert!(res.grad.norm() == 0.0);
    }

    #[test]
    fn stale_record_is_a_pairing_error() {
        let (m, w, b, v) = outer_setup();
        let draws = draw_rvl(&v, &b, &UncertaintySetSpec::default(), 1, &mut seeded(1)).unwrap();
        let (after, rec) = inner_step(&m, &w, &b, 0.1, 3).unwrap();
        assert!(matches!(
            outer_implicit_grad(&rec, &after, &v, &b, &draws, &w, 4),
            Err(LabError::Pairing(_))
        ));
        assert!(matches!(
            outer_implicit_grad(&rec, &m, &v, &b, &draws, &w, 3),
            Err(LabError::Pairing(_))
        ));
    }

    #[test]
    fn rounds_are_deterministic_and_count_steps() {
        let (m, w, b, v) = outer_setup();
        let run = || {
            let mut mm = m.clone();
            let mut ww = w.clone();
            let mut st = BilevelState::new(0.01, 1e-2, UncertaintySetSpec::default(), 1, OptimizerKind::PlainGradientDescent, ww.num_params()).unwrap();
            let mut rng = seeded(5);
            for _ in 0..3 {
                bilevel_round(&mut mm, &mut ww, &v, &b, None, &mut st, &mut rng).unwrap();
            }
            (mm, ww, st.step_counter)
        };
        let (m1, w1, c1) = run();
        let (m2, w2, _) = run();
        assert_eq!(c1, 3);
        assert_eq!(m1, m2);
        assert_eq!(w1, w2);
    }

    #[test]
    fn constant_weighting_round_is_plain_weighted_step() {
        let (m, _, b, v) = outer_setup();
        let mut w = unit_weighting();
        let before = w.clone();
        let mut mm = m.clone();
        let mut st = BilevelState::new(0.02, 1e-2, UncertaintySetSpec::default(), 1, OptimizerKind::PlainGradientDescent, w.num_params()).unwrap();
        bilevel_round(&mut mm, &mut w, &v, &b, None, &mut st, &mut seeded(3)).unwrap();
        let (expect, _) = inner_step(&m, &before, &b, 0.02, 0).unwrap();
        assert_eq!(mm, expect);
    }
}
