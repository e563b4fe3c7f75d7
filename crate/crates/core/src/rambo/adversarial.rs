//! `lambda * E[V(s^')] - E[log T(s' | s, a)]` with `s^'` reparameterised from
//! the model at policy actions.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{nll_loss, GaussianMember, TransitionBatch};
use crate::error::{LabError, Result};
use crate::nn::GradVector;
use crate::rng::normal_matrix;
use crate::rvl::{draw_value_noise, ValueFunction};
use crate::sac::GaussianPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialConfig {
    pub lambda: f64,
    /// Dataset states per adversarial evaluation.
    pub adv_rollout_batch: usize,
    /// Model steps per adversarial evaluation; only one-step values are used.
    pub adv_horizon: usize,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig {
            lambda: 3e-4,
            adv_rollout_batch: 256,
            adv_horizon: 1,
        }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(LabError::Domain(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.adv_rollout_batch == 0 || self.adv_horizon == 0 {
            return Err(LabError::Domain("adversarial batch and horizon must be >= 1".into()));
        }
        Ok(())
    }
}

/// Frozen randomness of one adversarial evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialDraws {
    pub policy_noise: Array2<f64>,
    pub model_noise: Array2<f64>,
    pub value_noise: Array2<f64>,
}

pub fn draw_adversarial<R: Rng + ?Sized>(
    policy: &GaussianPolicy,
    value: &dyn ValueFunction,
    rows: usize,
    state_dim: usize,
    rng: &mut R,
) -> AdversarialDraws {
    AdversarialDraws {
        policy_noise: normal_matrix(rng, rows, policy.action_dim),
        model_noise: normal_matrix(rng, rows, state_dim),
        value_noise: draw_value_noise(value, rows, rng),
    }
}

#[derive(Clone, Debug)]
pub struct AdversarialOutcome {
    pub loss: f64,
    pub grad: GradVector,
    /// `|| grad_psi (lambda * mean V(s^')) ||`.
    pub adv_grad_norm: f64,
    pub mean_value: f64,
}

/// Loss and gradient at frozen draws. The NLL uses `batch`; the value term
/// starts from `adv_states` (the batch states when `None`) and is only added
/// when `lambda > 0`, so `lambda = 0` reproduces the NLL bit for bit.
pub fn adversarial_loss_with<'a>(
    member: &GaussianMember,
    policy: &GaussianPolicy,
    value: &dyn ValueFunction,
    batch: &'a TransitionBatch,
    adv_states: Option<ArrayView2<'a, f64>>,
    cfg: &AdversarialConfig,
    draws: &AdversarialDraws,
) -> Result<AdversarialOutcome> {
    cfg.validate()?;
    let (nll, mut grad) = nll_loss(member, batch)?;
    let states = adv_states.unwrap_or(batch.states.view());
    let n = states.nrows();
    if draws.policy_noise.nrows() != n || draws.model_noise.nrows() != n {
        return Err(LabError::Shape(format!("adversarial draws cover {} rows, states {n}", draws.model_noise.nrows())));
    }
    let actions = policy.sample(states, draws.policy_noise.view())?.actions;
    let (sp, rc) = member.sample_with_noise(states, actions.view(), draws.model_noise.view())?;
    let (v, dv) = value.eval_with_state_grad(sp.view(), draws.value_noise.view())?;
    let mean_value = v.sum() / n as f64;
    let mut loss = nll;
    let mut adv_grad_norm = 0.0;
    if cfg.lambda > 0.0 {
        let up = dv * (cfg.lambda / n as f64);
        let g_adv = member.reparam_backward(&rc, up.view())?;
        adv_grad_norm = g_adv.norm();
        grad.add_scaled(&g_adv, 1.0);
        loss += cfg.lambda * mean_value;
    }
    if !loss.is_finite() || !grad.is_finite() {
        return Err(LabError::Divergence(format!("adversarial loss is {loss}")));
    }
    Ok(AdversarialOutcome {
        loss,
        grad,
        adv_grad_norm,
        mean_value,
    })
}

pub fn adversarial_loss<'a, R: Rng + ?Sized>(
    member: &GaussianMember,
    policy: &GaussianPolicy,
    value: &dyn ValueFunction,
    batch: &'a TransitionBatch,
    adv_states: Option<ArrayView2<'a, f64>>,
    cfg: &AdversarialConfig,
    rng: &mut R,
) -> Result<AdversarialOutcome> {
    let rows = adv_states.as_ref().map_or(batch.len(), |s| s.nrows());
    let draws = draw_adversarial(policy, value, rows, member.state_dim, rng);
    adversarial_loss_with(member, policy, value, batch, adv_states, cfg, &draws)
}
