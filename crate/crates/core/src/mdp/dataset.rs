//! Offline datasets and their on-disk format.
//!
//! A dataset named `<name>` is stored as `<name>.meta.json` (metadata) and
//! `<name>.jsonl` (one transition per line). `<name>.csv` is an inspection
//! export with header `s_0..s_k,a_0..a_m,r,sp_0..sp_k,terminal`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::continuous::ContinuousEnv;
use super::policy::BehaviorPolicy;
use super::tabular::TabularMDP;
use crate::error::{shape_err, LabError, Result};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Either a tabular MDP (states and actions encoded as one-element index
/// vectors) or a continuous environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Environment {
    Tabular(TabularMDP),
    Continuous(ContinuousEnv),
}

impl Environment {
    pub fn id(&self) -> String {
        match self {
            Environment::Tabular(m) => format!("tabular-{}x{}", m.num_states, m.num_actions),
            Environment::Continuous(e) => e.name().to_string(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Environment::Tabular(_) => 1,
            Environment::Continuous(e) => e.state_dim(),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Environment::Tabular(_) => 1,
            Environment::Continuous(e) => e.action_dim(),
        }
    }

    pub fn as_continuous(&self) -> Result<&ContinuousEnv> {
        match self {
            Environment::Continuous(e) => Ok(e),
            Environment::Tabular(_) => Err(LabError::Config("operation needs a continuous environment".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env_id: String,
    pub env: Environment,
    pub behavior: BehaviorPolicy,
    pub behavior_descriptor: String,
    pub seed: u64,
    pub count: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub transitions: Vec<Transition>,
    pub meta: DatasetMeta,
}

impl OfflineDataset {
    pub fn new(transitions: Vec<Transition>, meta: DatasetMeta) -> Result<Self> {
        if transitions.is_empty() {
            return Err(LabError::Domain("offline dataset must be non-empty".into()));
        }
        for t in &transitions {
            if t.state.len() != meta.state_dim || t.next_state.len() != meta.state_dim || t.action.len() != meta.action_dim {
                return Err(shape_err("transition does not match dataset dimensions"));
            }
        }
        Ok(OfflineDataset { transitions, meta })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.meta.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.meta.action_dim
    }

    /// Uniform sample of `n` row indices, with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.len())).collect()
    }

    pub fn batch(&self, idx: &[usize]) -> Vec<Transition> {
        idx.iter().map(|&i| self.transitions[i].clone()).collect()
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let meta_path = dir.join(format!("{name}.meta.json"));
        let data_path = dir.join(format!("{name}.jsonl"));
        fs::write(&meta_path, serde_json::to_vec_pretty(&self.meta)?)?;
        let mut w = BufWriter::new(File::create(&data_path)?);
        for t in &self.transitions {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok((meta_path, data_path))
    }

    pub fn read(dir: &Path, name: &str) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join(format!("{name}.meta.json")))?)?;
        let reader = BufReader::new(File::open(dir.join(format!("{name}.jsonl")))?);
        let mut transitions = Vec::with_capacity(meta.count);
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            transitions.push(serde_json::from_str(&line)?);
        }
        if transitions.len() != meta.count {
            return Err(LabError::Shape(format!(
                "metadata declares {} transitions, file holds {}",
                meta.count,
                transitions.len()
            )));
        }
        OfflineDataset::new(transitions, meta)
    }

    /// Split a `<dir>/<name>` path as accepted by the CLI.
    pub fn read_path(path: &Path) -> Result<Self> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let file = path
            .file_name()
            .and_then(|f| f.to_str())
            .ok_or_else(|| LabError::Config(format!("bad dataset path {}", path.display())))?;
        let name = file.trim_end_matches(".jsonl").trim_end_matches(".meta.json");
        OfflineDataset::read(dir, name)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let (k, m) = (self.state_dim(), self.action_dim());
        let mut header: Vec<String> = (0..k).map(|i| format!("s_{i}")).collect();
        header.extend((0..m).map(|i| format!("a_{i}")));
        header.push("r".into());
        header.extend((0..k).map(|i| format!("sp_{i}")));
        header.push("terminal".into());
        writeln!(w, "{}", header.join(","))?;
        for t in &self.transitions {
            let mut fields: Vec<String> = t.state.iter().map(f64::to_string).collect();
            fields.extend(t.action.iter().map(f64::to_string));
            fields.push(t.reward.to_string());
            fields.extend(t.next_state.iter().map(f64::to_string));
            fields.push(t.terminal.to_string());
            writeln!(w, "{}", fields.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Stack rows of a transition batch into `(states, actions, next_states)`.
pub fn batch_arrays(batch: &[Transition]) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let n = batch.len();
    let k = batch.first().map_or(0, |t| t.state.len());
    let m = batch.first().map_or(0, |t| t.action.len());
    let s = Array2::from_shape_fn((n, k), |(i, j)| batch[i].state[j]);
    let a = Array2::from_shape_fn((n, m), |(i, j)| batch[i].action[j]);
    let sp = Array2::from_shape_fn((n, k), |(i, j)| batch[i].next_state[j]);
    (s, a, sp)
}

/// Roll a behaviour policy through the environment.
///
/// Continuous environments restart from the initial distribution after each
/// horizon or terminal step; tabular MDPs follow a single trajectory.
pub fn generate_dataset(
    env: &Environment,
    policy: &BehaviorPolicy,
    num_transitions: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if num_transitions == 0 {
        return Err(LabError::Domain("num_transitions must be >= 1".into()));
    }
    let mut rng = stream(seed, "dataset");
    let mut transitions = Vec::with_capacity(num_transitions);
    match env {
        Environment::Tabular(mdp) => {
            let table = policy.tabular_table(mdp)?;
            let mut s = mdp.sample_initial(&mut rng);
            while transitions.len() < num_transitions {
                let a = policy.sample_tabular(&table, s, &mut rng);
                let sp = mdp.sample_next(s, a, &mut rng);
                transitions.push(Transition {
                    state: vec![s as f64],
                    action: vec![a as f64],
                    reward: mdp.reward(s, a),
                    next_state: vec![sp as f64],
                    terminal: false,
                });
                s = sp;
            }
        }
        Environment::Continuous(cenv) => {
            'episodes: while transitions.len() < num_transitions {
                let mut s = cenv.sample_initial(&mut rng);
                for _ in 0..cenv.horizon().max(1) {
                    let a = policy.act_continuous(cenv, &s, &mut rng);
                    let (sp, r, done) = cenv.step(&s, &a, &mut rng)?;
                    transitions.push(Transition {
                        state: s,
                        action: a,
                        reward: r,
                        next_state: sp.clone(),
                        terminal: done,
                    });
                    if transitions.len() == num_transitions {
                        break 'episodes;
                    }
                    if done {
                        break;
                    }
                    s = sp;
                }
            }
        }
    }
    let meta = DatasetMeta {
        env_id: env.id(),
        env: env.clone(),
        behavior: *policy,
        behavior_descriptor: policy.describe(),
        seed,
        count: transitions.len(),
        state_dim: env.state_dim(),
        action_dim: env.action_dim(),
    };
    OfflineDataset::new(transitions, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_transition_starts_from_initial_distribution() {
        let mdp = TabularMDP::chain(5, 0.1, 0.9).unwrap();
        let ds = generate_dataset(&Environment::Tabular(mdp), &BehaviorPolicy::random(), 1, 3).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.transitions[0].state, vec![0.0]);
    }

    #[test]
    fn zero_transitions_rejected() {
        let env = Environment::Continuous(ContinuousEnv::point_mass());
        assert!(generate_dataset(&env, &BehaviorPolicy::random(), 0, 1).is_err());
    }

    #[test]
    fn csv_header_layout() {
        let env = Environment::Continuous(ContinuousEnv::linear_gaussian());
        let ds = generate_dataset(&env, &BehaviorPolicy::medium(), 4, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        ds.write_csv(&p).unwrap();
        let text = fs::read_to_string(p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "s_0,s_1,a_0,r,sp_0,sp_1,terminal");
        assert_eq!(lines.count(), 4);
    }

    #[test]
    fn write_then_read() {
        let env = Environment::Continuous(ContinuousEnv::point_mass());
        let ds = generate_dataset(&env, &BehaviorPolicy::medium(), 100, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path(), "pm").unwrap();
        let back = OfflineDataset::read(dir.path(), "pm").unwrap();
        assert_eq!(back, ds);
        let via_path = OfflineDataset::read_path(&dir.path().join("pm.jsonl")).unwrap();
        assert_eq!(via_path, ds);
    }
}
