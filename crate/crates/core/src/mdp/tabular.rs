//! Fully enumerated MDPs and exact dynamic-programming utilities.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

const ROW_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMDP {
    pub num_states: usize,
    pub num_actions: usize,
    /// Row-major `[s][a][s']`.
    pub transition: Vec<f64>,
    /// Row-major `[s][a]`.
    pub reward: Vec<f64>,
    pub initial_dist: Vec<f64>,
    pub discount: f64,
}

/// Greedy or fixed-policy backups.
#[derive(Clone, Debug, PartialEq)]
pub enum Backup<'a> {
    Greedy,
    Policy(&'a [Vec<f64>]),
}

impl TabularMDP {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        let mdp = TabularMDP {
            num_states,
            num_actions,
            transition,
            reward,
            initial_dist,
            discount,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.num_states, self.num_actions);
        if s == 0 || a == 0 {
            return Err(LabError::Domain("tabular MDP needs at least one state and action".into()));
        }
        if self.transition.len() != s * a * s || self.reward.len() != s * a || self.initial_dist.len() != s {
            return Err(LabError::Shape("tabular MDP table sizes disagree with dimensions".into()));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(LabError::Domain(format!("discount {} not in [0, 1)", self.discount)));
        }
        for st in 0..s {
            for ac in 0..a {
                let row = self.row(st, ac);
                if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                    return Err(LabError::Domain(format!("negative transition entry at ({st}, {ac})")));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > ROW_TOL {
                    return Err(LabError::Domain(format!("transition row ({st}, {ac}) sums to {total}")));
                }
            }
        }
        if self.initial_dist.iter().any(|&p| p < 0.0)
            || (self.initial_dist.iter().sum::<f64>() - 1.0).abs() > ROW_TOL
        {
            return Err(LabError::Domain("initial distribution is not a probability vector".into()));
        }
        Ok(())
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.num_states;
        let off = (s * self.num_actions + a) * n;
        &self.transition[off..off + n]
    }

    pub fn row_mut(&mut self, s: usize, a: usize) -> &mut [f64] {
        let n = self.num_states;
        let off = (s * self.num_actions + a) * n;
        &mut self.transition[off..off + n]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.num_actions + a]
    }

    /// Chain of `n` states with actions left (0) and right (1). With
    /// probability `slip` the opposite move happens. The ends reflect and
    /// reward 1 is paid in the right-most state.
    pub fn chain(n: usize, slip: f64, discount: f64) -> Result<Self> {
        if n == 0 || !(0.0..=1.0).contains(&slip) {
            return Err(LabError::Domain(format!("chain(n = {n}, slip = {slip})")));
        }
        let mut transition = vec![0.0; n * 2 * n];
        let mut reward = vec![0.0; n * 2];
        for s in 0..n {
            let left = s.saturating_sub(1);
            let right = (s + 1).min(n - 1);
            for (a, (intended, other)) in [(left, right), (right, left)].into_iter().enumerate() {
                let off = (s * 2 + a) * n;
                transition[off + intended] += 1.0 - slip;
                transition[off + other] += slip;
                if s == n - 1 {
                    reward[s * 2 + a] = 1.0;
                }
            }
        }
        let mut initial = vec![0.0; n];
        initial[0] = 1.0;
        TabularMDP::new(n, 2, transition, reward, initial, discount)
    }

    /// `width x height` gridworld with four moves, slip to a uniformly random
    /// move, and reward 1 in the far corner.
    pub fn gridworld(width: usize, height: usize, slip: f64, discount: f64) -> Result<Self> {
        let n = width * height;
        if n == 0 || n > 25 || !(0.0..=1.0).contains(&slip) {
            return Err(LabError::Domain(format!("gridworld({width}x{height}, slip {slip})")));
        }
        let moves: [(i64, i64); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];
        let target = |s: usize, m: usize| -> usize {
            let (x, y) = ((s % width) as i64, (s / width) as i64);
            let nx = (x + moves[m].0).clamp(0, width as i64 - 1);
            let ny = (y + moves[m].1).clamp(0, height as i64 - 1);
            (ny as usize) * width + nx as usize
        };
        let mut transition = vec![0.0; n * 4 * n];
        let mut reward = vec![0.0; n * 4];
        for s in 0..n {
            for a in 0..4 {
                let off = (s * 4 + a) * n;
                transition[off + target(s, a)] += 1.0 - slip;
                for m in 0..4 {
                    transition[off + target(s, m)] += slip / 4.0;
                }
                if s == n - 1 {
                    reward[s * 4 + a] = 1.0;
                }
            }
        }
        let mut initial = vec![0.0; n];
        initial[0] = 1.0;
        TabularMDP::new(n, 4, transition, reward, initial, discount)
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.initial_dist, rng)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        sample_categorical(self.row(s, a), rng)
    }

    /// One backup `r(s, a) + discount * sum_s' T(s'|s, a) V(s')` for every pair.
    pub fn q_from_v(&self, v: &[f64]) -> Vec<Vec<f64>> {
        (0..self.num_states)
            .map(|s| {
                (0..self.num_actions)
                    .map(|a| {
                        let ev: f64 = self.row(s, a).iter().zip(v).map(|(p, x)| p * x).sum();
                        self.reward(s, a) + self.discount * ev
                    })
                    .collect()
            })
            .collect()
    }

    /// Max-norm Bellman optimality residual of `v`.
    pub fn bellman_residual(&self, v: &[f64]) -> f64 {
        self.q_from_v(v)
            .iter()
            .zip(v)
            .map(|(q, vs)| (q.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - vs).abs())
            .fold(0.0, f64::max)
    }

    /// Policy-induced state transition matrix and reward vector.
    pub fn policy_matrices(&self, policy: &[Vec<f64>]) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.num_states;
        let mut p = DMatrix::zeros(n, n);
        let mut r = DVector::zeros(n);
        for s in 0..n {
            for a in 0..self.num_actions {
                let w = policy[s][a];
                r[s] += w * self.reward(s, a);
                for (sp, t) in self.row(s, a).iter().enumerate() {
                    p[(s, sp)] += w * t;
                }
            }
        }
        (p, r)
    }
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Optimal state and action values by value iteration until the max-norm
/// Bellman residual of the returned `V` is at most `tol`.
pub fn value_iteration(mdp: &TabularMDP, tol: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if !(tol > 0.0) {
        return Err(LabError::Domain(format!("tolerance must be > 0, got {tol}")));
    }
    let mut v = vec![0.0; mdp.num_states];
    loop {
        let q = mdp.q_from_v(&v);
        let next: Vec<f64> = q
            .iter()
            .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta <= tol && mdp.bellman_residual(&v) <= tol {
            let q = mdp.q_from_v(&v);
            return Ok((v, q));
        }
    }
}

/// Iterate a Bellman operator (greedy or fixed policy) to its fixed point.
///
/// `next_expectation(s, a, v)` supplies the expected next-state value, which
/// lets callers substitute a learned or robust model for the true rows.
pub fn fixed_point_q<F>(
    num_states: usize,
    num_actions: usize,
    discount: f64,
    reward: impl Fn(usize, usize) -> f64,
    next_expectation: F,
    backup: &Backup<'_>,
    tol: f64,
) -> Vec<Vec<f64>>
where
    F: Fn(usize, usize, &[f64]) -> f64,
{
    let mut q = vec![vec![0.0; num_actions]; num_states];
    loop {
        let v: Vec<f64> = q
            .iter()
            .enumerate()
            .map(|(s, row)| match backup {
                Backup::Greedy => row.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                Backup::Policy(pi) => row.iter().zip(&pi[s]).map(|(x, p)| x * p).sum(),
            })
            .collect();
        let mut delta: f64 = 0.0;
        let next: Vec<Vec<f64>> = (0..num_states)
            .map(|s| {
                (0..num_actions)
                    .map(|a| {
                        let val = reward(s, a) + discount * next_expectation(s, a, &v);
                        delta = delta.max((val - q[s][a]).abs());
                        val
                    })
                    .collect()
            })
            .collect();
        q = next;
        if delta <= tol || discount == 0.0 {
            return q;
        }
    }
}

/// Exact `V^pi` by solving `(I - discount * P_pi) V = r_pi`.
pub fn evaluate_policy_exact(mdp: &TabularMDP, policy: &[Vec<f64>]) -> Result<Vec<f64>> {
    if policy.len() != mdp.num_states || policy.iter().any(|p| p.len() != mdp.num_actions) {
        return Err(LabError::Shape("policy table does not match the MDP".into()));
    }
    let (p, r) = mdp.policy_matrices(policy);
    let n = mdp.num_states;
    let a = DMatrix::identity(n, n) - p * mdp.discount;
    let v = a
        .lu()
        .solve(&r)
        .ok_or_else(|| LabError::Domain("policy evaluation system is singular".into()))?;
    Ok(v.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rows_are_distributions() {
        let m = TabularMDP::chain(5, 0.2, 0.9).unwrap();
        for s in 0..5 {
            for a in 0..2 {
                assert!((m.row(s, a).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(m.row(0, 1)[1], 0.8);
    }

    #[test]
    fn invalid_rows_rejected() {
        let err = TabularMDP::new(1, 1, vec![0.9], vec![0.0], vec![1.0], 0.5);
        assert!(err.is_err());
        let err = TabularMDP::new(1, 1, vec![1.0], vec![0.0], vec![1.0], 1.0);
        assert!(err.is_err());
    }

    #[test]
    fn single_state_geometric_value() {
        let m = TabularMDP::new(1, 1, vec![1.0], vec![1.0], vec![1.0], 0.9).unwrap();
        let (v, q) = value_iteration(&m, 1e-10).unwrap();
        assert!((v[0] - 10.0).abs() < 1e-8);
        assert!((q[0][0] - v[0]).abs() < 1e-9);
    }

    #[test]
    fn two_state_chain_by_hand() {
        // state 0 -> goal (1) deterministically, goal absorbing with reward 1.
        // V(goal) = 1 / (1 - 0.5) = 2, V(0) = 0 + 0.5 * 2 = 1.
        let m = TabularMDP::new(2, 1, vec![0.0, 1.0, 0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0], 0.5).unwrap();
        let (v, _) = value_iteration(&m, 1e-12).unwrap();
        assert!((v[1] - 2.0).abs() < 1e-10);
        assert!((v[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_rewards_zero_values() {
        let mut m = TabularMDP::chain(4, 0.1, 0.95).unwrap();
        m.reward.iter_mut().for_each(|r| *r = 0.0);
        let (v, _) = value_iteration(&m, 1e-9).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn residual_meets_tolerance() {
        let m = TabularMDP::gridworld(3, 3, 0.2, 0.9).unwrap();
        for tol in [1e-3, 1e-6, 1e-10] {
            let (v, q) = value_iteration(&m, tol).unwrap();
            assert!(m.bellman_residual(&v) <= tol);
            let q2 = m.q_from_v(&v);
            assert_eq!(q, q2);
        }
    }

    #[test]
    fn exact_policy_evaluation_matches_fixed_point() {
        let m = TabularMDP::chain(5, 0.1, 0.9).unwrap();
        let pi = vec![vec![0.3, 0.7]; 5];
        let v = evaluate_policy_exact(&m, &pi).unwrap();
        let q = fixed_point_q(5, 2, 0.9, |s, a| m.reward(s, a), |s, a, v| {
            m.row(s, a).iter().zip(v).map(|(p, x)| p * x).sum()
        }, &Backup::Policy(&pi), 1e-13);
        for s in 0..5 {
            let vs: f64 = q[s].iter().zip(&pi[s]).map(|(x, p)| x * p).sum();
            assert!((vs - v[s]).abs() < 1e-9);
        }
    }
}
