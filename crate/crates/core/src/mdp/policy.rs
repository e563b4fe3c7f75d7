//! Behaviour policies that generate offline datasets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::continuous::ContinuousEnv;
use super::tabular::{sample_categorical, value_iteration, TabularMDP};
use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BehaviorKind {
    /// Uniform over the action set or box.
    Random,
    /// With probability `noise_level` act uniformly, otherwise act like the
    /// oracle (greedy on `Q*` for tabular MDPs, the expert controller otherwise).
    EpsilonGreedy,
    /// Oracle action plus Gaussian noise of scale `noise_level` (continuous);
    /// on tabular MDPs this is a softmax over `Q*` at temperature `noise_level`.
    NoisyExpert,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPolicy {
    pub kind: BehaviorKind,
    pub noise_level: f64,
}

impl BehaviorPolicy {
    pub fn new(kind: BehaviorKind, noise_level: f64) -> Result<Self> {
        if !(noise_level >= 0.0) || !noise_level.is_finite() {
            return Err(LabError::Domain(format!("noise level must be >= 0, got {noise_level}")));
        }
        if kind == BehaviorKind::EpsilonGreedy && noise_level > 1.0 {
            return Err(LabError::Domain(format!("epsilon {noise_level} exceeds 1")));
        }
        Ok(BehaviorPolicy { kind, noise_level })
    }

    pub fn random() -> Self {
        BehaviorPolicy {
            kind: BehaviorKind::Random,
            noise_level: 0.0,
        }
    }

    /// Epsilon-greedy on the oracle with epsilon 0.3.
    pub fn medium() -> Self {
        BehaviorPolicy {
            kind: BehaviorKind::EpsilonGreedy,
            noise_level: 0.3,
        }
    }

    pub fn expert_mix() -> Self {
        BehaviorPolicy {
            kind: BehaviorKind::NoisyExpert,
            noise_level: 0.1,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "random" => Ok(Self::random()),
            "medium" => Ok(Self::medium()),
            "expert" | "expert-mix" => Ok(Self::expert_mix()),
            other => Err(LabError::Config(format!("unknown behaviour preset {other:?}"))),
        }
    }

    /// Action distribution for every state of a tabular MDP.
    pub fn tabular_table(&self, mdp: &TabularMDP) -> Result<Vec<Vec<f64>>> {
        let na = mdp.num_actions;
        let uniform = vec![1.0 / na as f64; na];
        if self.kind == BehaviorKind::Random {
            return Ok(vec![uniform; mdp.num_states]);
        }
        let (_, q) = value_iteration(mdp, 1e-10)?;
        Ok(q.iter()
            .map(|row| match self.kind {
                BehaviorKind::EpsilonGreedy => {
                    let best = argmax(row);
                    (0..na)
                        .map(|a| {
                            self.noise_level / na as f64 + if a == best { 1.0 - self.noise_level } else { 0.0 }
                        })
                        .collect()
                }
                BehaviorKind::NoisyExpert => softmax(row, self.noise_level),
                BehaviorKind::Random => unreachable!(),
            })
            .collect())
    }

    pub fn sample_tabular<R: Rng + ?Sized>(&self, table: &[Vec<f64>], s: usize, rng: &mut R) -> usize {
        sample_categorical(&table[s], rng)
    }

    pub fn act_continuous<R: Rng + ?Sized>(&self, env: &ContinuousEnv, s: &[f64], rng: &mut R) -> Vec<f64> {
        let lim = env.action_limit();
        let uniform = |rng: &mut R| -> Vec<f64> { (0..env.action_dim()).map(|_| rng.random_range(-lim..=lim)).collect() };
        match self.kind {
            BehaviorKind::Random => uniform(rng),
            BehaviorKind::EpsilonGreedy => {
                if rng.random::<f64>() < self.noise_level {
                    uniform(rng)
                } else {
                    env.expert_action(s)
                }
            }
            BehaviorKind::NoisyExpert => {
                let base = env.expert_action(s);
                let noisy: Vec<f64> = base
                    .iter()
                    .map(|a| a + self.noise_level * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                env.clip_action(&noisy)
            }
        }
    }

    pub fn describe(&self) -> String {
        format!("{:?}(noise_level={})", self.kind, self.noise_level)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 0.0 {
        let mut out = vec![0.0; row.len()];
        out[argmax(row)] = 1.0;
        return out;
    }
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
