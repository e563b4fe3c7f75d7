//! Twin Q critics, entropy temperature and the soft state value.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::{column, GaussianPolicy};
use crate::error::{shape_err, LabError, Result};
use crate::nn::{Activation, GradVector, Mlp, NetSpec, Optimizer, OutputTransform};
use crate::rvl::ValueFunction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinCritics {
    pub online: [Mlp; 2],
    pub target: [Mlp; 2],
    pub tau: f64,
}

fn sa(s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
    if s.nrows() != a.nrows() {
        return Err(shape_err("state and action batches differ in length"));
    }
    Ok(concatenate(Axis(1), &[s.view(), a.view()]).expect("rows checked"))
}

impl TwinCritics {
    pub fn init<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: Vec<usize>, tau: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(LabError::Domain(format!("tau must lie in [0, 1], got {tau}")));
        }
        let spec = NetSpec::new(state_dim + action_dim, 1, hidden, Activation::Relu, OutputTransform::Identity)?;
        let q1 = Mlp::init(spec.clone(), rng)?;
        let q2 = Mlp::init(spec, rng)?;
        Ok(TwinCritics {
            target: [q1.clone(), q2.clone()],
            online: [q1, q2],
            tau,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.online[0].spec.input_dim
    }

    pub fn q(net: &Mlp, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(net.forward(sa(s, a)?.view())?.column(0).to_owned())
    }

    /// Elementwise minimum of the two online critics.
    pub fn min_q(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array1<f64>> {
        let q1 = Self::q(&self.online[0], s, a)?;
        let q2 = Self::q(&self.online[1], s, a)?;
        Ok(Array1::from_shape_fn(q1.len(), |i| q1[i].min(q2[i])))
    }

    /// `target <- (1 - tau) target + tau online`.
    pub fn soft_update(&mut self) {
        let tau = self.tau;
        for (t, o) in self.target.iter_mut().zip(&self.online) {
            for (tv, ov) in t.params.as_mut_slice().iter_mut().zip(o.params.as_slice()) {
                *tv = (1.0 - tau) * *tv + tau * ov;
            }
        }
    }

    /// L2 distance between online and target parameters of each critic.
    pub fn target_gap(&self) -> [f64; 2] {
        let gap = |j: usize| {
            self.online[j]
                .params
                .as_slice()
                .iter()
                .zip(self.target[j].params.as_slice())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        [gap(0), gap(1)]
    }
}

/// Min-twin values of `nets` with gradients with respect to `s` and `a`.
fn min_q_with_input_grad(nets: &[Mlp; 2], s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)> {
    let x = sa(s, a)?;
    let k = s.ncols();
    let (o1, c1) = nets[0].forward_cached(x.view())?;
    let (o2, c2) = nets[1].forward_cached(x.view())?;
    let n = x.nrows();
    let pick_first: Vec<bool> = (0..n).map(|i| o1[[i, 0]] <= o2[[i, 0]]).collect();
    let q = Array1::from_shape_fn(n, |i| if pick_first[i] { o1[[i, 0]] } else { o2[[i, 0]] });
    let m1 = Array2::from_shape_fn((n, 1), |(i, _)| if pick_first[i] { 1.0 } else { 0.0 });
    let m2 = m1.mapv(|v| 1.0 - v);
    let (_, d1) = nets[0].backward(&c1, m1.view())?;
    let (_, d2) = nets[1].backward(&c2, m2.view())?;
    let dx = d1 + d2;
    Ok((q, dx.slice(s![.., ..k]).to_owned(), dx.slice(s![.., k..]).to_owned()))
}

/// `V(s) = min_j Q_target_j(s, a~) - alpha * log pi(a~ | s)`, `a~` drawn with `noise`.
pub fn target_value(
    critics: &TwinCritics,
    policy: &GaussianPolicy,
    alpha: f64,
    states: ArrayView2<f64>,
    noise: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    let smp = policy.sample(states, noise)?;
    let q1 = TwinCritics::q(&critics.target[0], states, smp.actions.view())?;
    let q2 = TwinCritics::q(&critics.target[1], states, smp.actions.view())?;
    Ok(Array1::from_shape_fn(q1.len(), |i| q1[i].min(q2[i]) - alpha * smp.log_prob[i]))
}

/// The soft target value as a [`ValueFunction`] whose noise is the policy's
/// reparameterisation noise.
pub struct SacValue<'a> {
    pub critics: &'a TwinCritics,
    pub policy: &'a GaussianPolicy,
    pub alpha: f64,
    pub include_entropy: bool,
}

impl ValueFunction for SacValue<'_> {
    fn state_dim(&self) -> usize {
        self.policy.state_dim()
    }

    fn noise_dim(&self) -> usize {
        self.policy.action_dim
    }

    fn eval(&self, states: ArrayView2<f64>, noise: ArrayView2<f64>) -> Result<Array1<f64>> {
        let alpha = if self.include_entropy { self.alpha } else { 0.0 };
        target_value(self.critics, self.policy, alpha, states, noise)
    }

    fn eval_with_state_grad(&self, states: ArrayView2<f64>, noise: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let alpha = if self.include_entropy { self.alpha } else { 0.0 };
        let smp = self.policy.sample(states, noise)?;
        let (q, dq_ds, dq_da) = min_q_with_input_grad(&self.critics.target, states, smp.actions.view())?;
        let v = &q - &(&smp.log_prob * alpha);
        let gl = Array1::from_elem(states.nrows(), -alpha);
        let (_, dpi_ds) = self.policy.backward(&smp, dq_da.view(), &gl)?;
        Ok((v, dq_ds + dpi_ds))
    }
}

/// `sum_j mean_i (Q_j(s_i, a_i) - y_i)^2` and the gradient for each critic.
pub fn critic_loss_grad(
    critics: &TwinCritics,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    targets: &Array1<f64>,
) -> Result<(f64, [GradVector; 2])> {
    let x = sa(states, actions)?;
    let n = x.nrows() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(2);
    for net in &critics.online {
        let (out, cache) = net.forward_cached(x.view())?;
        let diff = &out.column(0) - targets;
        loss += diff.mapv(|d| d * d).sum() / n;
        let up = column(&(diff * (2.0 / n)));
        grads.push(net.backward(&cache, up.view())?.0);
    }
    if !loss.is_finite() {
        return Err(LabError::Divergence(format!("critic loss is {loss}")));
    }
    let g2 = grads.pop().expect("two critics");
    let g1 = grads.pop().expect("two critics");
    Ok((loss, [g1, g2]))
}

/// `mean_i [alpha log pi(a_i | s_i) - min_j Q_j(s_i, a_i)]` at frozen noise,
/// its policy gradient and the mean log-probability.
pub fn actor_loss_grad(
    policy: &GaussianPolicy,
    critics: &TwinCritics,
    alpha: f64,
    states: ArrayView2<f64>,
    noise: ArrayView2<f64>,
) -> Result<(f64, GradVector, f64)> {
    let n = states.nrows() as f64;
    let smp = policy.sample(states, noise)?;
    let (q, _, dq_da) = min_q_with_input_grad(&critics.online, states, smp.actions.view())?;
    let loss = (&smp.log_prob * alpha - &q).sum() / n;
    if !loss.is_finite() {
        return Err(LabError::Divergence(format!("actor loss is {loss}")));
    }
    let ga = dq_da * (-1.0 / n);
    let gl = Array1::from_elem(states.nrows(), alpha / n);
    let (grad, _) = policy.backward(&smp, ga.view(), &gl)?;
    Ok((loss, grad, smp.log_prob.mean().unwrap_or(0.0)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyCoef {
    pub log_alpha: f64,
    pub target_entropy: f64,
    opt: Optimizer,
}

impl EntropyCoef {
    pub fn new(log_alpha: f64, target_entropy: f64, lr: f64) -> Self {
        EntropyCoef {
            log_alpha,
            target_entropy,
            opt: Optimizer::adam(lr, 1),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// d/d(log_alpha) of `-log_alpha * (mean log pi + target_entropy)`.
    pub fn gradient(&self, mean_log_prob: f64) -> f64 {
        -(mean_log_prob + self.target_entropy)
    }

    pub fn update(&mut self, mean_log_prob: f64) -> Result<()> {
        let g = GradVector::new(vec![self.gradient(mean_log_prob)]);
        let mut p = [self.log_alpha];
        self.opt.step(&mut p, &g)?;
        self.log_alpha = p[0];
        Ok(())
    }
}
