//! Monte-Carlo estimates of the generalization errors epsilon_1 and epsilon_2.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::uncertainty::{sample_offset, UncertaintySetSpec};
use super::value::{draw_value_noise, ValueFunction};
use crate::dynamics::{GaussianDynamicsEnsemble, ModelBuffer};
use crate::error::{LabError, Result};
use crate::mdp::{ContinuousEnv, OfflineDataset};
use crate::nn::lipschitz_estimate;
use crate::rng::normal_matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonConfig {
    /// Buffer rows examined (sampled with replacement).
    pub rows: usize,
    /// Monte-Carlo draws per row for each expectation.
    pub mc_samples: usize,
    /// Dataset states used for the Lipschitz lower bound.
    pub lipschitz_states: usize,
}

impl Default for EpsilonConfig {
    fn default() -> Self {
        EpsilonConfig {
            rows: 256,
            mc_samples: 8,
            lipschitz_states: 128,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RvlDiagnostics {
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub epsilon1_p99: f64,
    pub epsilon2_p99: f64,
    pub lipschitz_lb: f64,
    pub model_pred_err: f64,
    pub corollary_bound: f64,
}

/// Robust targets `min_c V(next_i + offset_ic)` evaluated with row noise `u_i`
/// shared across the candidates of a row.
fn robust_with_offsets(
    value: &dyn ValueFunction,
    next: ArrayView2<f64>,
    offsets: &[Vec<Vec<f64>>],
    noise: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    let (n, k) = next.dim();
    let c = offsets.first().map_or(0, Vec::len);
    let mut cands = Array2::zeros((n * c, k));
    let mut cand_noise = Array2::zeros((n * c, noise.ncols()));
    for i in 0..n {
        for (j, off) in offsets[i].iter().enumerate() {
            for d in 0..k {
                cands[[i * c + j, d]] = next[[i, d]] + off[d];
            }
            cand_noise.row_mut(i * c + j).assign(&noise.row(i));
        }
    }
    let vals = value.eval(cands.view(), cand_noise.view())?;
    Ok(Array1::from_shape_fn(n, |i| {
        (0..c).map(|j| vals[i * c + j]).fold(f64::INFINITY, f64::min)
    }))
}

fn percentile(mut xs: Vec<f64>, q: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let idx = ((xs.len() as f64 - 1.0) * q).round() as usize;
    xs[idx]
}

/// Row-wise `|E_{T_psi} V - E_{T_MLE}[min_U V]|` (epsilon_1) and
/// `|E_{T_psi} V - E_{T}[min_U V]|` (epsilon_2) over buffer rows, reported as
/// the maximum and the 99th percentile. All three expectations share member
/// picks, transition noise, set offsets and value noise.
#[allow(clippy::too_many_arguments)]
pub fn compute_epsilons<R: Rng + ?Sized>(
    ensemble: &GaussianDynamicsEnsemble,
    mle_snapshot: &GaussianDynamicsEnsemble,
    value: &dyn ValueFunction,
    buffer: &ModelBuffer,
    dataset: &OfflineDataset,
    env: &ContinuousEnv,
    spec: &UncertaintySetSpec,
    cfg: &EpsilonConfig,
    rng: &mut R,
) -> Result<RvlDiagnostics> {
    spec.validate()?;
    if cfg.rows == 0 || cfg.mc_samples == 0 {
        return Err(LabError::Domain("epsilon estimation needs rows and samples".into()));
    }
    let rows = buffer.sample(cfg.rows, rng)?;
    let m = cfg.mc_samples;
    let n = rows.len() * m;
    let k = ensemble.state_dim();
    let s = Array2::from_shape_fn((n, k), |(i, j)| rows[i / m].state[j]);
    let a = Array2::from_shape_fn((n, ensemble.action_dim()), |(i, j)| rows[i / m].action[j]);
    let picks: Vec<usize> = (0..n).map(|_| ensemble.random_member(rng)).collect();
    let z = normal_matrix(rng, n, k);
    let u = draw_value_noise(value, n, rng);
    let offsets: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|_| {
            let mut set = Vec::with_capacity(spec.num_samples);
            if spec.include_center {
                set.push(vec![0.0; k]);
            }
            while set.len() < spec.num_samples {
                set.push(sample_offset(k, spec.xi, spec.metric, rng));
            }
            set
        })
        .collect();

    let model_next = ensemble.sample_mixture(s.view(), a.view(), &picks, z.view())?;
    let mle_next = mle_snapshot.sample_mixture(s.view(), a.view(), &picks, z.view())?;
    let mut true_next = Array2::zeros((n, k));
    for i in 0..n {
        let sp = env.next_with_noise(&s.row(i).to_vec(), &a.row(i).to_vec(), &z.row(i).to_vec())?;
        true_next.row_mut(i).assign(&Array1::from(sp));
    }
    let pred = value.eval(model_next.view(), u.view())?;
    let mle_target = robust_with_offsets(value, mle_next.view(), &offsets, u.view())?;
    let true_target = robust_with_offsets(value, true_next.view(), &offsets, u.view())?;

    let mut e1 = Vec::with_capacity(rows.len());
    let mut e2 = Vec::with_capacity(rows.len());
    let mut pred_err: f64 = 0.0;
    for r in 0..rows.len() {
        let span = r * m..(r + 1) * m;
        let mean = |v: &Array1<f64>| v.slice(ndarray::s![span.clone()]).sum() / m as f64;
        let p = mean(&pred);
        e1.push((p - mean(&mle_target)).abs());
        e2.push((p - mean(&true_target)).abs());
        let dist = span
            .clone()
            .map(|i| {
                (0..k)
                    .map(|d| (model_next[[i, d]] - true_next[[i, d]]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / m as f64;
        pred_err = pred_err.max(dist);
    }

    let ds_idx = dataset.sample_indices(cfg.lipschitz_states.max(2), rng);
    let states = Array2::from_shape_fn((ds_idx.len(), k), |(i, j)| dataset.transitions[ds_idx[i]].next_state[j]);
    let zero_noise = Array2::zeros((states.nrows(), value.noise_dim()));
    let lipschitz_lb = lipschitz_estimate(
        |x| {
            let nz = zero_noise.slice(ndarray::s![..x.nrows(), ..]);
            value.eval(x, nz).expect("value evaluation on dataset states")
        },
        states.view(),
    )?;
    let diag = RvlDiagnostics {
        epsilon1: e1.iter().cloned().fold(0.0, f64::max),
        epsilon2: e2.iter().cloned().fold(0.0, f64::max),
        epsilon1_p99: percentile(e1, 0.99),
        epsilon2_p99: percentile(e2, 0.99),
        lipschitz_lb,
        model_pred_err: pred_err,
        corollary_bound: lipschitz_lb * (pred_err + spec.xi),
    };
    Ok(diag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{rollout, PretrainConfig};
    use crate::mdp::{generate_dataset, BehaviorPolicy, Environment};
    use crate::rng::seeded;
    use crate::rvl::uncertainty::Metric;
    use crate::rvl::value::LinearValue;

    fn setup() -> (GaussianDynamicsEnsemble, ModelBuffer, OfflineDataset, ContinuousEnv) {
        let env = ContinuousEnv::linear_gaussian();
        let ds = generate_dataset(&Environment::Continuous(env.clone()), &BehaviorPolicy::random(), 400, 1).unwrap();
        let mut e = GaussianDynamicsEnsemble::new(2, 1, vec![16, 16], 3, 2).unwrap();
        let cfg = PretrainConfig {
            epochs: 20,
            lr: 3e-3,
            batch_size: 64,
        };
        crate::dynamics::pretrain_mle(&mut e, &ds, &cfg, 3).unwrap();
        let mut buf = ModelBuffer::new(500).unwrap();
        rollout(
            &e,
            &env,
            |s: &Array2<f64>, _: &mut crate::rng::LabRng| Ok(Array2::zeros((s.nrows(), 1))),
            &ds,
            &mut buf,
            2,
            50,
            &mut seeded(4),
        )
        .unwrap();
        (e, buf, ds, env)
    }

    fn value() -> LinearValue {
        LinearValue {
            weights: vec![1.0, -0.5],
            bias: 0.0,
        }
    }

    #[test]
    fn snapshot_equal_to_model_gives_zero_epsilon1() {
        let (e, buf, ds, env) = setup();
        let spec = UncertaintySetSpec::new(0.0, 4, Metric::EuclideanBall, true).unwrap();
        let d = compute_epsilons(&e, &e, &value(), &buf, &ds, &env, &spec, &EpsilonConfig::default(), &mut seeded(5))
            .unwrap();
        assert_eq!(d.epsilon1, 0.0);
        assert!(d.epsilon2 >= 0.0 && d.lipschitz_lb > 0.0);
        assert!(d.corollary_bound.is_finite());
    }

    #[test]
    fn epsilon2_grows_with_radius() {
        let (e, buf, ds, env) = setup();
        let mut prev = -1.0;
        for xi in [0.0, 0.1, 0.5] {
            let spec = UncertaintySetSpec::new(xi, 10, Metric::EuclideanBall, true).unwrap();
            let d = compute_epsilons(&e, &e, &value(), &buf, &ds, &env, &spec, &EpsilonConfig::default(), &mut seeded(6))
                .unwrap();
            assert!(d.epsilon2 >= prev, "xi {xi}: {} < {prev}", d.epsilon2);
            prev = d.epsilon2;
        }
    }

    #[test]
    fn empty_buffer_rejected() {
        let (e, _, ds, env) = setup();
        let buf = ModelBuffer::new(5).unwrap();
        let spec = UncertaintySetSpec::default();
        assert!(compute_epsilons(&e, &e, &value(), &buf, &ds, &env, &spec, &EpsilonConfig::default(), &mut seeded(1)).is_err());
    }
}
