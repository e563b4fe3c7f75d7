//! Exact check of the two-sided Q-value bound on small tabular MDPs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::mdp::{evaluate_policy_exact, generate_dataset, value_iteration, Backup, BehaviorPolicy, Environment, OfflineDataset, TabularMDP};
use crate::rvl::UncertaintySetSpec;

const FIXED_POINT_TOL: f64 = 1e-12;
const BOUND_TOL: f64 = 1e-8;
const MAX_ITERS: usize = 1_000_000;

/// Tabular transition estimate `[s][a][s']`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularModel {
    pub num_states: usize,
    pub num_actions: usize,
    pub transition: Vec<f64>,
}

impl TabularModel {
    pub fn from_mdp(mdp: &TabularMDP) -> Self {
        TabularModel {
            num_states: mdp.num_states,
            num_actions: mdp.num_actions,
            transition: mdp.transition.clone(),
        }
    }

    /// Empirical next-state frequencies; unvisited pairs get a uniform row.
    pub fn from_counts(dataset: &OfflineDataset, num_states: usize, num_actions: usize) -> Result<Self> {
        let mut counts = vec![0.0; num_states * num_actions * num_states];
        for t in &dataset.transitions {
            let (s, a, sp) = (t.state[0] as usize, t.action[0] as usize, t.next_state[0] as usize);
            if s >= num_states || a >= num_actions || sp >= num_states {
                return Err(LabError::Shape(format!("transition ({s}, {a}, {sp}) outside the table")));
            }
            counts[(s * num_actions + a) * num_states + sp] += 1.0;
        }
        for row in counts.chunks_mut(num_states) {
            let total: f64 = row.iter().sum();
            if total == 0.0 {
                row.fill(1.0 / num_states as f64);
            } else {
                row.iter_mut().for_each(|c| *c /= total);
            }
        }
        Ok(TabularModel {
            num_states,
            num_actions,
            transition: counts,
        })
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let off = (s * self.num_actions + a) * self.num_states;
        &self.transition[off..off + self.num_states]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundViolation {
    pub state: usize,
    pub action: usize,
    pub q_hat: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QBoundReport {
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub q_hat: Vec<Vec<f64>>,
    pub q_true: Vec<Vec<f64>>,
    /// Smallest `upper - Q_hat` and `Q_hat - lower` over all pairs.
    pub upper_slack: f64,
    pub lower_slack: f64,
    pub iterations: usize,
    pub violations: Vec<BoundViolation>,
}

impl QBoundReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn max_abs_error(&self) -> f64 {
        self.q_hat
            .iter()
            .flatten()
            .zip(self.q_true.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn state_values(q: &[Vec<f64>], backup: &Backup<'_>) -> Vec<f64> {
    q.iter()
        .enumerate()
        .map(|(s, row)| match backup {
            Backup::Greedy => row.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            Backup::Policy(pi) => row.iter().zip(&pi[s]).map(|(x, p)| x * p).sum(),
        })
        .collect()
}

fn dot(p: &[f64], v: &[f64]) -> f64 {
    p.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Iterates the learned-model Bellman operator from zero to its fixed point,
/// measuring the two generalization gaps at every iterate, and checks
/// `Q_true - g (e1 + e2) / (1 - g) <= Q_hat <= Q_true + g e1 / (1 - g)` on
/// every state-action pair. `Q_true` is the fixed point under the MDP's own
/// rows, which play the role of the maximum-likelihood model. States are
/// embedded on the line at their index for the uncertainty-set distance.
pub fn q_bound_check(mdp: &TabularMDP, learned: &TabularModel, spec: &UncertaintySetSpec, backup: &Backup<'_>) -> Result<QBoundReport> {
    mdp.validate()?;
    let (ns, na, g) = (mdp.num_states, mdp.num_actions, mdp.discount);
    if learned.num_states != ns || learned.num_actions != na || learned.transition.len() != ns * na * ns {
        return Err(LabError::Shape("learned model does not match the MDP".into()));
    }
    if let Backup::Policy(pi) = backup {
        if pi.len() != ns || pi.iter().any(|r| r.len() != na) {
            return Err(LabError::Shape("policy table does not match the MDP".into()));
        }
    }
    if !(spec.xi >= 0.0) {
        return Err(LabError::Domain(format!("xi must be >= 0, got {}", spec.xi)));
    }
    let balls: Vec<Vec<usize>> = (0..ns)
        .map(|i| (0..ns).filter(|&j| spec.metric.distance(&[i as f64], &[j as f64]) <= spec.xi).collect())
        .collect();

    let mut q = vec![vec![0.0; na]; ns];
    let (mut e1, mut e2) = (0.0_f64, 0.0_f64);
    let mut iterations = 0;
    loop {
        let v = state_values(&q, backup);
        let vmin: Vec<f64> = balls.iter().map(|b| b.iter().map(|&j| v[j]).fold(f64::INFINITY, f64::min)).collect();
        let mut delta: f64 = 0.0;
        let mut next = vec![vec![0.0; na]; ns];
        for s in 0..ns {
            for a in 0..na {
                let model = dot(learned.row(s, a), &v);
                let reference = dot(mdp.row(s, a), &v);
                let robust = dot(mdp.row(s, a), &vmin);
                e1 = e1.max((model - robust).abs());
                e2 = e2.max((reference - robust).abs());
                next[s][a] = mdp.reward(s, a) + g * model;
                delta = delta.max((next[s][a] - q[s][a]).abs());
            }
        }
        q = next;
        iterations += 1;
        if delta <= FIXED_POINT_TOL || g == 0.0 {
            break;
        }
        if iterations >= MAX_ITERS {
            return Err(LabError::Divergence("learned-model fixed point did not converge".into()));
        }
    }

    let q_true = match backup {
        Backup::Greedy => value_iteration(mdp, FIXED_POINT_TOL)?.1,
        Backup::Policy(pi) => mdp.q_from_v(&evaluate_policy_exact(mdp, pi)?),
    };
    let (mut upper_slack, mut lower_slack) = (f64::INFINITY, f64::INFINITY);
    let mut violations = Vec::new();
    let scale = if g == 0.0 { 0.0 } else { g / (1.0 - g) };
    for s in 0..ns {
        for a in 0..na {
            let upper = q_true[s][a] + scale * e1;
            let lower = q_true[s][a] - scale * (e1 + e2);
            upper_slack = upper_slack.min(upper - q[s][a]);
            lower_slack = lower_slack.min(q[s][a] - lower);
            if q[s][a] > upper + BOUND_TOL || q[s][a] < lower - BOUND_TOL {
                violations.push(BoundViolation {
                    state: s,
                    action: a,
                    q_hat: q[s][a],
                    lower,
                    upper,
                });
            }
        }
    }
    Ok(QBoundReport {
        epsilon1: e1,
        epsilon2: e2,
        q_hat: q,
        q_true,
        upper_slack,
        lower_slack,
        iterations,
        violations,
    })
}

/// 5-state chain with random slip, discount and per-row perturbations, plus
/// a count-based model fitted to a short random-behaviour trajectory.
pub fn perturbed_chain<R: Rng + ?Sized>(rng: &mut R, num_states: usize, samples: usize) -> Result<(TabularMDP, TabularModel)> {
    let slip = rng.random_range(0.0..0.4);
    let discount = rng.random_range(0.5..0.95);
    let mut mdp = TabularMDP::chain(num_states, slip, discount)?;
    let eta = rng.random_range(0.0..0.3);
    for row in mdp.transition.chunks_mut(num_states) {
        let noise: Vec<f64> = (0..num_states).map(|_| rng.random::<f64>()).collect();
        let total: f64 = noise.iter().sum();
        for (p, z) in row.iter_mut().zip(&noise) {
            *p = (1.0 - eta) * *p + eta * z / total;
        }
    }
    for r in mdp.reward.iter_mut() {
        *r += rng.random_range(-0.1..0.1);
    }
    mdp.validate()?;
    let seed = rng.random::<u64>();
    let ds = generate_dataset(&Environment::Tabular(mdp.clone()), &BehaviorPolicy::random(), samples, seed)?;
    let model = TabularModel::from_counts(&ds, num_states, mdp.num_actions)?;
    Ok((mdp, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::rvl::Metric;

    fn spec(xi: f64) -> UncertaintySetSpec {
        UncertaintySetSpec {
            xi,
            num_samples: 1,
            metric: Metric::EuclideanBall,
            include_center: true,
        }
    }

    #[test]
    fn perfect_model_zero_radius_is_exact() {
        let mdp = TabularMDP::chain(5, 0.2, 0.9).unwrap();
        let r = q_bound_check(&mdp, &TabularModel::from_mdp(&mdp), &spec(0.0), &Backup::Greedy).unwrap();
        assert_eq!(r.epsilon1, 0.0);
        assert_eq!(r.epsilon2, 0.0);
        assert!(r.max_abs_error() < 1e-9);
        assert!(r.passed());
    }

    #[test]
    fn myopic_limit_ignores_the_model() {
        let mdp = TabularMDP::chain(5, 0.2, 0.0).unwrap();
        let mut model = TabularModel::from_mdp(&mdp);
        model.transition.chunks_mut(5).for_each(|r| r.fill(0.2));
        let r = q_bound_check(&mdp, &model, &spec(1.0), &Backup::Greedy).unwrap();
        for s in 0..5 {
            for a in 0..2 {
                assert_eq!(r.q_hat[s][a], mdp.reward(s, a));
                assert_eq!(r.q_true[s][a], mdp.reward(s, a));
            }
        }
    }

    #[test]
    fn counted_models_satisfy_bounds() {
        let mut rng = seeded(4);
        for xi in [0.0, 1.0, 2.0] {
            let (mdp, model) = perturbed_chain(&mut rng, 5, 200).unwrap();
            let pi = vec![vec![0.5, 0.5]; 5];
            for backup in [Backup::Greedy, Backup::Policy(&pi)] {
                let r = q_bound_check(&mdp, &model, &spec(xi), &backup).unwrap();
                assert!(r.passed(), "{:?}", r.violations);
                assert!(r.epsilon1 > 0.0);
            }
        }
    }

    #[test]
    fn radius_increases_second_gap() {
        let mdp = TabularMDP::chain(5, 0.1, 0.9).unwrap();
        let m = TabularModel::from_mdp(&mdp);
        let e: Vec<f64> = [0.0, 1.0, 4.0]
            .iter()
            .map(|&xi| q_bound_check(&mdp, &m, &spec(xi), &Backup::Greedy).unwrap().epsilon2)
            .collect();
        assert_eq!(e[0], 0.0);
        assert!(e[0] <= e[1] && e[1] <= e[2] && e[2] > 0.0);
    }

    #[test]
    fn counts_use_uniform_rows_when_unvisited() {
        let mdp = TabularMDP::chain(4, 0.0, 0.9).unwrap();
        let ds = generate_dataset(&Environment::Tabular(mdp.clone()), &BehaviorPolicy::random(), 1, 0).unwrap();
        let m = TabularModel::from_counts(&ds, 4, 2).unwrap();
        let visited = (ds.transitions[0].state[0] as usize, ds.transitions[0].action[0] as usize);
        for s in 0..4 {
            for a in 0..2 {
                let row = m.row(s, a);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                if (s, a) != visited {
                    assert!(row.iter().all(|&p| p == 0.25));
                }
            }
        }
    }
}
