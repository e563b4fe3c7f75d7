//! Synthetic-transition storage and branched model rollouts.

use ndarray::Array2;
use rand::Rng;

use super::ensemble::GaussianDynamicsEnsemble;
use crate::error::{shape_err, LabError, Result};
use crate::mdp::{ContinuousEnv, OfflineDataset, Transition};
use crate::rng::normal_matrix;

/// Fixed-capacity ring buffer; the oldest record is overwritten first.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBuffer {
    capacity: usize,
    data: Vec<Transition>,
    cursor: usize,
}

impl ModelBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(LabError::Domain("buffer capacity must be >= 1".into()));
        }
        Ok(ModelBuffer {
            capacity,
            data: Vec::new(),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.data.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Transition>> {
        if self.is_empty() {
            return Err(LabError::EmptySource("model buffer is empty".into()));
        }
        Ok((0..n).map(|_| self.data[rng.random_range(0..self.len())].clone()).collect())
    }

    pub fn clear(&mut self) {
        self.data.clear();
        self.cursor = 0;
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutStats {
    pub transitions: usize,
    pub member_counts: Vec<usize>,
    pub terminated: usize,
}

/// Advance every state one model step, appending the synthetic transitions.
/// Returns the non-terminal successor states.
pub fn rollout_step<P, R>(
    ensemble: &GaussianDynamicsEnsemble,
    env: &ContinuousEnv,
    policy: &mut P,
    states: &Array2<f64>,
    buffer: &mut ModelBuffer,
    rng: &mut R,
    stats: &mut RolloutStats,
) -> Result<Array2<f64>>
where
    P: FnMut(&Array2<f64>, &mut R) -> Result<Array2<f64>>,
    R: Rng + ?Sized,
{
    let n = states.nrows();
    let k = ensemble.state_dim();
    if states.ncols() != k {
        return Err(shape_err("rollout states do not match the model"));
    }
    if stats.member_counts.len() != ensemble.len() {
        stats.member_counts = vec![0; ensemble.len()];
    }
    let actions = policy(states, rng)?;
    if actions.dim() != (n, ensemble.action_dim()) {
        return Err(shape_err("policy returned a malformed action batch"));
    }
    let picks: Vec<usize> = (0..n).map(|_| ensemble.random_member(rng)).collect();
    let noise = normal_matrix(rng, n, k);
    let mut next = Array2::zeros((n, k));
    for (m, member) in ensemble.members.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&i| picks[i] == m).collect();
        if rows.is_empty() {
            continue;
        }
        stats.member_counts[m] += rows.len();
        let s = states.select(ndarray::Axis(0), &rows);
        let a = actions.select(ndarray::Axis(0), &rows);
        let z = noise.select(ndarray::Axis(0), &rows);
        let (sp, _) = member.sample_with_noise(s.view(), a.view(), z.view())?;
        for (r, &i) in rows.iter().enumerate() {
            next.row_mut(i).assign(&sp.row(r));
        }
    }
    let mut keep = Vec::with_capacity(n);
    for i in 0..n {
        let s = states.row(i).to_vec();
        let a = actions.row(i).to_vec();
        let mut sp = next.row(i).to_vec();
        if sp.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Divergence("model rollout produced a non-finite state".into()));
        }
        env.clip_state(&mut sp);
        let reward = env.reward(&s, &a)?;
        let terminal = env.is_terminal(&sp);
        if terminal {
            stats.terminated += 1;
        } else {
            keep.push(i);
        }
        next.row_mut(i).assign(&ndarray::ArrayView1::from(&sp));
        buffer.push(Transition {
            state: s,
            action: a,
            reward,
            next_state: sp,
            terminal,
        });
        stats.transitions += 1;
    }
    Ok(next.select(ndarray::Axis(0), &keep))
}

/// `batch` start states drawn uniformly from the dataset, rolled `horizon`
/// steps through uniformly chosen members.
#[allow(clippy::too_many_arguments)]
pub fn rollout<P, R>(
    ensemble: &GaussianDynamicsEnsemble,
    env: &ContinuousEnv,
    mut policy: P,
    dataset: &OfflineDataset,
    buffer: &mut ModelBuffer,
    horizon: usize,
    batch: usize,
    rng: &mut R,
) -> Result<RolloutStats>
where
    P: FnMut(&Array2<f64>, &mut R) -> Result<Array2<f64>>,
    R: Rng + ?Sized,
{
    if horizon == 0 {
        return Err(LabError::Domain("rollout horizon must be >= 1".into()));
    }
    let mut states = start_states(dataset, batch, rng);
    let mut stats = RolloutStats {
        member_counts: vec![0; ensemble.len()],
        ..RolloutStats::default()
    };
    for _ in 0..horizon {
        if states.nrows() == 0 {
            break;
        }
        states = rollout_step(ensemble, env, &mut policy, &states, buffer, rng, &mut stats)?;
    }
    Ok(stats)
}

pub fn start_states<R: Rng + ?Sized>(dataset: &OfflineDataset, batch: usize, rng: &mut R) -> Array2<f64> {
    let k = dataset.state_dim();
    let mut out = Array2::zeros((batch, k));
    for i in 0..batch {
        let t = &dataset.transitions[rng.random_range(0..dataset.len())];
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&t.state));
    }
    out
}
