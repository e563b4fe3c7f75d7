//! Tanh-squashed Gaussian policy with explicit reparameterisation noise.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::{Activation, ForwardCache, GradVector, Mlp, NetSpec, OutputTransform};

pub const MIN_LOG_STD: f64 = -20.0;
pub const MAX_LOG_STD: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
const LN_2: f64 = std::f64::consts::LN_2;

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 - tanh(u)^2)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub action_dim: usize,
    pub action_limit: f64,
}

/// Sampled actions and what the backward pass needs.
#[derive(Clone, Debug)]
pub struct PolicySample {
    pub actions: Array2<f64>,
    pub log_prob: Array1<f64>,
    cache: ForwardCache,
    noise: Array2<f64>,
    pre_tanh: Array2<f64>,
    std: Array2<f64>,
}

impl GaussianPolicy {
    pub fn init<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: Vec<usize>, action_limit: f64, rng: &mut R) -> Result<Self> {
        let spec = NetSpec::new(
            state_dim,
            action_dim,
            hidden,
            Activation::Relu,
            OutputTransform::GaussianHead {
                min_log_var: MIN_LOG_STD,
                max_log_var: MAX_LOG_STD,
            },
        )?;
        Ok(GaussianPolicy {
            net: Mlp::init(spec, rng)?,
            action_dim,
            action_limit,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.net.spec.input_dim
    }

    pub fn params(&self) -> &[f64] {
        self.net.params.as_slice()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params.as_mut_slice()
    }

    pub fn with_params(&self, values: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.net.params = self.net.params.with_values(values.to_vec())?;
        Ok(out)
    }

    /// `a = limit * tanh(mu + sigma * eps)` and `log pi(a | s)`.
    pub fn sample(&self, states: ArrayView2<f64>, noise: ArrayView2<f64>) -> Result<PolicySample> {
        let m = self.action_dim;
        if noise.dim() != (states.nrows(), m) {
            return Err(shape_err("policy noise must be rows x action_dim"));
        }
        let (out, cache) = self.net.forward_cached(states)?;
        let mean = out.slice(s![.., ..m]);
        let std = out.slice(s![.., m..]).mapv(f64::exp);
        let pre_tanh = &mean + &(&std * &noise);
        let actions = pre_tanh.mapv(|u| self.action_limit * u.tanh());
        let n = states.nrows();
        let mut log_prob = Array1::zeros(n);
        for i in 0..n {
            let mut lp = 0.0;
            for j in 0..m {
                let e = noise[[i, j]];
                lp += -0.5 * e * e - out[[i, m + j]] - HALF_LN_2PI;
                lp -= self.action_limit.ln() + log_one_minus_tanh_sq(pre_tanh[[i, j]]);
            }
            log_prob[i] = lp;
        }
        Ok(PolicySample {
            actions,
            log_prob,
            cache,
            noise: noise.to_owned(),
            pre_tanh,
            std,
        })
    }

    /// Deterministic action `limit * tanh(mu)`.
    pub fn mean_action(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        let out = self.net.forward(states)?;
        Ok(out.slice(s![.., ..self.action_dim]).mapv(|u| self.action_limit * u.tanh()))
    }

    /// Gradient of `sum_i (<g_a_i, a_i> + g_lp_i * log pi(a_i | s_i))` with
    /// respect to the parameters and the states, at the sample's noise.
    pub fn backward(&self, sample: &PolicySample, grad_actions: ArrayView2<f64>, grad_log_prob: &Array1<f64>) -> Result<(GradVector, Array2<f64>)> {
        let m = self.action_dim;
        let n = sample.actions.nrows();
        if grad_actions.dim() != (n, m) || grad_log_prob.len() != n {
            return Err(shape_err("policy upstream gradients do not match the sample"));
        }
        let mut up = Array2::zeros((n, 2 * m));
        for i in 0..n {
            for j in 0..m {
                let t = sample.pre_tanh[[i, j]].tanh();
                let g_u = grad_actions[[i, j]] * self.action_limit * (1.0 - t * t) + grad_log_prob[i] * 2.0 * t;
                up[[i, j]] = g_u;
                up[[i, m + j]] = g_u * sample.std[[i, j]] * sample.noise[[i, j]] - grad_log_prob[i];
            }
        }
        self.net.backward(&sample.cache, up.view())
    }
}

/// Standard-normal policy noise for `rows` states.
pub fn policy_noise<R: Rng + ?Sized>(policy: &GaussianPolicy, rows: usize, rng: &mut R) -> Array2<f64> {
    crate::rng::normal_matrix(rng, rows, policy.action_dim)
}

pub(crate) fn column(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(Axis(1))
}
