//! Continuous-state environments with known reward functions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::rng::normal_vec;

/// Damped 2-D point mass. State is `(x, y, vx, vy)`, action is an
/// acceleration in `[-1, 1]^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMass {
    pub dt: f64,
    pub damping: f64,
    pub pos_limit: f64,
    pub vel_limit: f64,
    pub process_noise: f64,
    pub control_cost: f64,
    pub init_spread: f64,
    pub horizon: usize,
    pub discount: f64,
}

impl Default for PointMass {
    fn default() -> Self {
        PointMass {
            dt: 0.2,
            damping: 0.9,
            pos_limit: 2.0,
            vel_limit: 2.0,
            process_noise: 0.01,
            control_cost: 0.1,
            init_spread: 1.5,
            horizon: 40,
            discount: 0.99,
        }
    }
}

/// `s' = A s + B a + sigma * z` on a 2-D state with a scalar action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussian {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
    pub noise: f64,
    pub state_limit: f64,
    pub action_limit: f64,
    pub init_spread: f64,
    pub horizon: usize,
    pub discount: f64,
}

impl Default for LinearGaussian {
    fn default() -> Self {
        LinearGaussian {
            a: [[0.9, 0.2], [-0.1, 0.8]],
            b: [0.0, 0.5],
            noise: 0.05,
            state_limit: 10.0,
            action_limit: 1.0,
            init_spread: 1.0,
            horizon: 30,
            discount: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ContinuousEnv {
    PointMass(PointMass),
    LinearGaussian(LinearGaussian),
}

impl ContinuousEnv {
    pub fn point_mass() -> Self {
        ContinuousEnv::PointMass(PointMass::default())
    }

    pub fn linear_gaussian() -> Self {
        ContinuousEnv::LinearGaussian(LinearGaussian::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            ContinuousEnv::PointMass(_) => "point-mass",
            ContinuousEnv::LinearGaussian(_) => "linear-gaussian",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ContinuousEnv::PointMass(_) => 4,
            ContinuousEnv::LinearGaussian(_) => 2,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            ContinuousEnv::PointMass(_) => 2,
            ContinuousEnv::LinearGaussian(_) => 1,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            ContinuousEnv::PointMass(p) => p.horizon,
            ContinuousEnv::LinearGaussian(l) => l.horizon,
        }
    }

    pub fn discount(&self) -> f64 {
        match self {
            ContinuousEnv::PointMass(p) => p.discount,
            ContinuousEnv::LinearGaussian(l) => l.discount,
        }
    }

    /// Symmetric action box half-width.
    pub fn action_limit(&self) -> f64 {
        match self {
            ContinuousEnv::PointMass(_) => 1.0,
            ContinuousEnv::LinearGaussian(l) => l.action_limit,
        }
    }

    pub fn state_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            ContinuousEnv::PointMass(p) => {
                let hi = vec![p.pos_limit, p.pos_limit, p.vel_limit, p.vel_limit];
                (hi.iter().map(|v| -v).collect(), hi)
            }
            ContinuousEnv::LinearGaussian(l) => (vec![-l.state_limit; 2], vec![l.state_limit; 2]),
        }
    }

    pub fn process_noise(&self) -> f64 {
        match self {
            ContinuousEnv::PointMass(p) => p.process_noise,
            ContinuousEnv::LinearGaussian(l) => l.noise,
        }
    }

    pub fn clip_state(&self, s: &mut [f64]) {
        let (lo, hi) = self.state_bounds();
        for ((v, l), h) in s.iter_mut().zip(&lo).zip(&hi) {
            *v = v.clamp(*l, *h);
        }
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        let lim = self.action_limit();
        a.iter().map(|v| v.clamp(-lim, lim)).collect()
    }

    fn check(&self, s: &[f64], a: &[f64]) -> Result<()> {
        if s.len() != self.state_dim() || a.len() != self.action_dim() {
            return Err(shape_err(format!(
                "{}: got state dim {} action dim {}, expected {} and {}",
                self.name(),
                s.len(),
                a.len(),
                self.state_dim(),
                self.action_dim()
            )));
        }
        Ok(())
    }

    /// Noise-free next state before clipping.
    fn drift(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        match self {
            ContinuousEnv::PointMass(p) => {
                let vx = p.damping * s[2] + p.dt * a[0];
                let vy = p.damping * s[3] + p.dt * a[1];
                vec![s[0] + p.dt * vx, s[1] + p.dt * vy, vx, vy]
            }
            ContinuousEnv::LinearGaussian(l) => vec![
                l.a[0][0] * s[0] + l.a[0][1] * s[1] + l.b[0] * a[0],
                l.a[1][0] * s[0] + l.a[1][1] * s[1] + l.b[1] * a[0],
            ],
        }
    }

    /// Clipped noise-free next state.
    pub fn mean_next(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.check(s, a)?;
        let a = self.clip_action(a);
        let mut next = self.drift(s, &a);
        self.clip_state(&mut next);
        Ok(next)
    }

    /// Next state driven by a caller-supplied standard-normal draw.
    pub fn next_with_noise(&self, s: &[f64], a: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.check(s, a)?;
        let a = self.clip_action(a);
        let sigma = self.process_noise();
        let mut next = self.drift(s, &a);
        for (v, zi) in next.iter_mut().zip(z) {
            *v += sigma * zi;
        }
        self.clip_state(&mut next);
        Ok(next)
    }

    /// Known reward function of `(s, a)`.
    pub fn reward(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        self.check(s, a)?;
        let a = self.clip_action(a);
        Ok(match self {
            ContinuousEnv::PointMass(p) => {
                let mut next = self.drift(s, &a);
                self.clip_state(&mut next);
                -(next[0] * next[0] + next[1] * next[1]) - p.control_cost * (a[0] * a[0] + a[1] * a[1])
            }
            ContinuousEnv::LinearGaussian(_) => -(s[0] * s[0] + s[1] * s[1]) - 0.1 * a[0] * a[0],
        })
    }

    /// Termination predicate on (possibly predicted) states. Neither toy terminates.
    pub fn is_terminal(&self, _s: &[f64]) -> bool {
        false
    }

    pub fn step<R: Rng + ?Sized>(&self, s: &[f64], a: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64, bool)> {
        self.check(s, a)?;
        let z = normal_vec(rng, self.state_dim());
        let mut s_in = s.to_vec();
        self.clip_state(&mut s_in);
        let reward = self.reward(&s_in, a)?;
        let next = self.next_with_noise(&s_in, a, &z)?;
        let terminal = self.is_terminal(&next);
        Ok((next, reward, terminal))
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            ContinuousEnv::PointMass(p) => vec![
                rng.random_range(-p.init_spread..=p.init_spread),
                rng.random_range(-p.init_spread..=p.init_spread),
                0.0,
                0.0,
            ],
            ContinuousEnv::LinearGaussian(l) => vec![
                rng.random_range(-l.init_spread..=l.init_spread),
                rng.random_range(-l.init_spread..=l.init_spread),
            ],
        }
    }

    /// Hand-designed stabilising controller used as the "expert".
    pub fn expert_action(&self, s: &[f64]) -> Vec<f64> {
        let raw = match self {
            ContinuousEnv::PointMass(_) => vec![-2.0 * s[0] - 2.0 * s[2], -2.0 * s[1] - 2.0 * s[3]],
            ContinuousEnv::LinearGaussian(_) => vec![0.2 * s[0] - 1.2 * s[1]],
        };
        self.clip_action(&raw)
    }
}
