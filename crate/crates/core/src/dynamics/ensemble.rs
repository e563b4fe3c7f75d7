//! Ensembles of Gaussian members, MLE pretraining and checkpoints.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::member::{nll_loss, GaussianMember, TransitionBatch};
use crate::error::{shape_err, LabError, Result};
use crate::mdp::OfflineDataset;
use crate::nn::{Optimizer, ParamVector};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianDynamicsEnsemble {
    pub members: Vec<GaussianMember>,
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EnsembleIndex {
    num_members: usize,
    state_dim: usize,
    action_dim: usize,
    hidden: Vec<usize>,
    members: Vec<String>,
}

impl GaussianDynamicsEnsemble {
    /// `size` members, each initialised from its own stream.
    pub fn new(state_dim: usize, action_dim: usize, hidden: Vec<usize>, size: usize, seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(LabError::Domain("ensemble needs at least one member".into()));
        }
        let members = (0..size)
            .map(|i| GaussianMember::init(state_dim, action_dim, hidden.clone(), &mut stream(seed, &format!("ensemble-init-{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(GaussianDynamicsEnsemble { members, hidden })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.members[0].state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.members[0].action_dim
    }

    pub fn random_member<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.len())
    }

    /// Next states where row `i` is drawn from member `picks[i]` with noise `z[i]`.
    pub fn sample_mixture(
        &self,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        picks: &[usize],
        z: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let n = s.nrows();
        if picks.len() != n || z.dim() != s.dim() {
            return Err(shape_err("member picks and noise must match the batch"));
        }
        let mut out = Array2::zeros(s.dim());
        for (m, member) in self.members.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&i| picks[i] == m).collect();
            if rows.is_empty() {
                continue;
            }
            let (sp, _) = member.sample_with_noise(
                s.select(Axis(0), &rows).view(),
                a.select(Axis(0), &rows).view(),
                z.select(Axis(0), &rows).view(),
            )?;
            for (r, &i) in rows.iter().enumerate() {
                out.row_mut(i).assign(&sp.row(r));
            }
        }
        Ok(out)
    }

    /// Writes `member_<i>.bin/.json` per member plus `ensemble.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut names = Vec::with_capacity(self.len());
        for (i, m) in self.members.iter().enumerate() {
            let name = format!("member_{i}");
            m.net.params.save(&dir.join(&name))?;
            names.push(name);
        }
        let index = EnsembleIndex {
            num_members: self.len(),
            state_dim: self.state_dim(),
            action_dim: self.action_dim(),
            hidden: self.hidden.clone(),
            members: names,
        };
        fs::write(dir.join("ensemble.json"), serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: EnsembleIndex = serde_json::from_slice(&fs::read(dir.join("ensemble.json"))?)?;
        if index.members.len() != index.num_members || index.num_members == 0 {
            return Err(LabError::Shape("ensemble index member count mismatch".into()));
        }
        let members = index
            .members
            .iter()
            .map(|name| {
                let params = ParamVector::load(&dir.join(name))?;
                GaussianMember::from_params(index.state_dim, index.action_dim, index.hidden.clone(), params)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GaussianDynamicsEnsemble {
            members,
            hidden: index.hidden,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 50,
            lr: 3e-4,
            batch_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean NLL of each member on the full dataset after training.
    pub final_nll: Vec<f64>,
}

/// Maximum-likelihood training of every member on its own bootstrap resample.
pub fn pretrain_mle(
    ensemble: &mut GaussianDynamicsEnsemble,
    dataset: &OfflineDataset,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    if cfg.epochs == 0 {
        return Err(LabError::Domain("pretraining epochs must be >= 1".into()));
    }
    if cfg.batch_size == 0 {
        return Err(LabError::Domain("batch size must be >= 1".into()));
    }
    let n = dataset.len();
    let full = TransitionBatch::from_transitions(&dataset.transitions)?;
    let mut final_nll = Vec::with_capacity(ensemble.len());
    for (i, member) in ensemble.members.iter_mut().enumerate() {
        let mut rng = stream(seed, &format!("pretrain-member-{i}"));
        let boot: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let mut opt = Optimizer::adam(cfg.lr, member.num_params());
        let mut order = boot.clone();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch = TransitionBatch::from_transitions(&dataset.batch(chunk))?;
                let (_, grad) = nll_loss(member, &batch)?;
                opt.step(member.params_mut(), &grad)?;
            }
        }
        final_nll.push(nll_loss(member, &full)?.0);
    }
    Ok(PretrainReport { final_nll })
}

/// Mean open-loop error after `steps` model steps, replaying dataset actions
/// along chains of consecutive non-terminal transitions. Each member predicts
/// with its mean; the error is averaged over members and start points.
pub fn multi_step_error(
    ensemble: &GaussianDynamicsEnsemble,
    dataset: &OfflineDataset,
    steps: usize,
    max_starts: usize,
) -> Result<f64> {
    if steps == 0 {
        return Err(LabError::Domain("steps must be >= 1".into()));
    }
    let t = &dataset.transitions;
    let chained = |i: usize| {
        (0..steps).all(|j| i + j < t.len() && !t[i + j].terminal)
            && (1..steps).all(|j| t[i + j].state == t[i + j - 1].next_state)
    };
    let starts: Vec<usize> = (0..t.len()).filter(|&i| chained(i)).take(max_starts).collect();
    if starts.is_empty() {
        return Err(LabError::EmptySource(format!("no {steps}-step chains in the dataset")));
    }
    let k = dataset.state_dim();
    let m = dataset.action_dim();
    let mut total = 0.0;
    for member in &ensemble.members {
        let mut s = Array2::from_shape_fn((starts.len(), k), |(r, j)| t[starts[r]].state[j]);
        for h in 0..steps {
            let a = Array2::from_shape_fn((starts.len(), m), |(r, j)| t[starts[r] + h].action[j]);
            s = member.predict(s.view(), a.view())?.mean;
        }
        for (r, &i) in starts.iter().enumerate() {
            let truth = &t[i + steps - 1].next_state;
            total += (0..k).map(|j| (s[[r, j]] - truth[j]).powi(2)).sum::<f64>().sqrt();
        }
    }
    Ok(total / (starts.len() * ensemble.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{generate_dataset, BehaviorPolicy, ContinuousEnv, Environment};

    #[test]
    fn members_never_share_parameters() {
        let e = GaussianDynamicsEnsemble::new(4, 2, vec![8], 3, 1).unwrap();
        assert_ne!(e.members[0].params(), e.members[1].params());
        assert_ne!(e.members[1].params(), e.members[2].params());
    }

    #[test]
    fn zero_epochs_rejected() {
        let env = Environment::Continuous(ContinuousEnv::linear_gaussian());
        let ds = generate_dataset(&env, &BehaviorPolicy::random(), 10, 1).unwrap();
        let mut e = GaussianDynamicsEnsemble::new(2, 1, vec![4], 2, 1).unwrap();
        let cfg = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        assert!(pretrain_mle(&mut e, &ds, &cfg, 0).is_err());
    }

    #[test]
    fn pretraining_is_deterministic_and_reduces_nll() {
        let env = Environment::Continuous(ContinuousEnv::linear_gaussian());
        let ds = generate_dataset(&env, &BehaviorPolicy::random(), 300, 2).unwrap();
        let cfg = PretrainConfig {
            epochs: 5,
            lr: 1e-3,
            batch_size: 32,
        };
        let init = GaussianDynamicsEnsemble::new(2, 1, vec![8, 8], 2, 3).unwrap();
        let full = TransitionBatch::from_transitions(&ds.transitions).unwrap();
        let before = nll_loss(&init.members[0], &full).unwrap().0;
        let mut a = init.clone();
        let mut b = init.clone();
        let ra = pretrain_mle(&mut a, &ds, &cfg, 4).unwrap();
        pretrain_mle(&mut b, &ds, &cfg, 4).unwrap();
        assert_eq!(a, b);
        assert!(ra.final_nll[0] < before);
    }

    #[test]
    fn multi_step_error_of_exact_deterministic_model_is_zero() {
        use crate::mdp::LinearGaussian;
        // zero-noise linear system with A = I and B = 0: the zero-delta member is exact
        let env = ContinuousEnv::LinearGaussian(LinearGaussian {
            a: [[1.0, 0.0], [0.0, 1.0]],
            b: [0.0, 0.0],
            noise: 0.0,
            ..LinearGaussian::default()
        });
        let ds = generate_dataset(&Environment::Continuous(env), &BehaviorPolicy::random(), 60, 1).unwrap();
        let spec = GaussianMember::spec(2, 1, vec![]).unwrap();
        let member = GaussianMember::from_params(2, 1, vec![], ParamVector::zeros(&spec)).unwrap();
        let e = GaussianDynamicsEnsemble {
            members: vec![member],
            hidden: vec![],
        };
        assert_eq!(multi_step_error(&e, &ds, 5, 100).unwrap(), 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let e = GaussianDynamicsEnsemble::new(4, 2, vec![5, 5], 3, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        e.save(dir.path()).unwrap();
        assert!(dir.path().join("ensemble.json").exists());
        assert_eq!(GaussianDynamicsEnsemble::load(dir.path()).unwrap(), e);
    }
}
