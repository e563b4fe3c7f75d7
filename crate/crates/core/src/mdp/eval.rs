//! Monte-Carlo policy evaluation and the normalized score.

use serde::{Deserialize, Serialize};

use super::continuous::ContinuousEnv;
use super::tabular::{sample_categorical, TabularMDP};
use crate::error::{LabError, Result};
use crate::rng::{stream, LabRng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnEstimate {
    pub mean: f64,
    pub std_dev: f64,
    pub std_err: f64,
    pub episodes: usize,
}

impl ReturnEstimate {
    pub fn from_returns(returns: &[f64]) -> Self {
        let n = returns.len();
        let mean = returns.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        ReturnEstimate {
            mean,
            std_dev: var.sqrt(),
            std_err: (var / n as f64).sqrt(),
            episodes: n,
        }
    }
}

/// Undiscounted return over `horizon` steps, averaged over episodes.
pub fn evaluate_continuous<F>(
    env: &ContinuousEnv,
    mut policy: F,
    num_episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<ReturnEstimate>
where
    F: FnMut(&[f64], &mut LabRng) -> Result<Vec<f64>>,
{
    if num_episodes == 0 {
        return Err(LabError::Domain("num_episodes must be >= 1".into()));
    }
    let mut env_rng = stream(seed, "eval-env");
    let mut policy_rng = stream(seed, "eval-policy");
    let mut returns = Vec::with_capacity(num_episodes);
    for _ in 0..num_episodes {
        let mut s = env.sample_initial(&mut env_rng);
        let mut total = 0.0;
        for _ in 0..horizon {
            let a = policy(&s, &mut policy_rng)?;
            let (sp, r, done) = env.step(&s, &a, &mut env_rng)?;
            total += r;
            if done {
                break;
            }
            s = sp;
        }
        returns.push(total);
    }
    Ok(ReturnEstimate::from_returns(&returns))
}

/// Discounted Monte-Carlo return of a tabular policy, truncated once the
/// remaining discount mass falls below 1e-10.
pub fn evaluate_tabular(
    mdp: &TabularMDP,
    policy: &[Vec<f64>],
    num_episodes: usize,
    seed: u64,
) -> Result<ReturnEstimate> {
    if num_episodes == 0 {
        return Err(LabError::Domain("num_episodes must be >= 1".into()));
    }
    let horizon = if mdp.discount == 0.0 {
        1
    } else {
        ((1e-10f64).ln() / mdp.discount.ln()).ceil() as usize + 1
    };
    let mut rng = stream(seed, "eval-tabular");
    let mut returns = Vec::with_capacity(num_episodes);
    for _ in 0..num_episodes {
        let mut s = mdp.sample_initial(&mut rng);
        let mut total = 0.0;
        let mut disc = 1.0;
        for _ in 0..horizon {
            let a = sample_categorical(&policy[s], &mut rng);
            total += disc * mdp.reward(s, a);
            disc *= mdp.discount;
            s = mdp.sample_next(s, a, &mut rng);
        }
        returns.push(total);
    }
    Ok(ReturnEstimate::from_returns(&returns))
}

/// `(J_pi - J_random) / (J_expert - J_random) * 100`.
pub fn normalized_score(j_pi: f64, j_random: f64, j_expert: f64) -> Result<f64> {
    if j_expert == j_random {
        return Err(LabError::DegenerateReference(j_expert));
    }
    Ok((j_pi - j_random) / (j_expert - j_random) * 100.0)
}
