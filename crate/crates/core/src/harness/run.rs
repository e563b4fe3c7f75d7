use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, CODE_VERSION};
use super::metrics::{aggregate, read_metrics, write_aggregate_csv, write_metrics_csv, AggregateRow, MetricsRecord, MetricsWriter};
use crate::dynamics::GaussianDynamicsEnsemble;
use crate::error::{LabError, Result};
use crate::mdp::{generate_dataset, BehaviorPolicy, Environment, OfflineDataset, ReturnEstimate};
use crate::nn::{Mlp, NetSpec, ParamVector};
use crate::sac::{pretrain_ensemble, train_with_callback, Algo, GaussianPolicy, ModelUpdate, TrainOutput, TwinCritics};

pub const OUT_ENV: &str = "ROMI_LAB_OUT";
pub const DEFAULT_OUT: &str = "romi-runs";

/// Explicit path, else `$ROMI_LAB_OUT`, else `./romi-runs`.
pub fn out_root(explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub algo: Algo,
    pub model_update: ModelUpdate,
    pub dataset_env: String,
    pub dataset_len: usize,
    pub epochs_completed: usize,
    pub diverged: bool,
    pub divergence: Option<String>,
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub output: TrainOutput,
}

pub fn obtain_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<OfflineDataset> {
    let ds = match &cfg.dataset {
        Some(p) => OfflineDataset::read_path(p)?,
        None => generate_dataset(
            &Environment::Continuous(cfg.env.clone()),
            &BehaviorPolicy::preset(&cfg.behavior)?,
            cfg.dataset_size,
            seed,
        )?,
    };
    ds.meta.env.as_continuous().map_err(|_| LabError::Config("training needs a continuous-environment dataset".into()))?;
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    spec: NetSpec,
    action_dim: usize,
    action_limit: f64,
}

pub fn save_policy(dir: &Path, policy: &GaussianPolicy) -> Result<()> {
    fs::create_dir_all(dir)?;
    policy.net.params.save(&dir.join("policy"))?;
    let meta = PolicyMeta {
        spec: policy.net.spec.clone(),
        action_dim: policy.action_dim,
        action_limit: policy.action_limit,
    };
    fs::write(dir.join("policy_meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_policy(dir: &Path) -> Result<GaussianPolicy> {
    let meta: PolicyMeta = serde_json::from_slice(&fs::read(dir.join("policy_meta.json"))?)?;
    let params = ParamVector::load(&dir.join("policy"))?;
    Ok(GaussianPolicy {
        net: Mlp::new(meta.spec, params)?,
        action_dim: meta.action_dim,
        action_limit: meta.action_limit,
    })
}

pub fn save_critics(dir: &Path, critics: &TwinCritics) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, (online, target)) in critics.online.iter().zip(&critics.target).enumerate() {
        online.params.save(&dir.join(format!("critic_{i}")))?;
        target.params.save(&dir.join(format!("critic_{i}_target")))?;
    }
    fs::write(dir.join("critic_spec.json"), serde_json::to_vec_pretty(&critics.online[0].spec)?)?;
    Ok(())
}

/// Trains one seed into `dir`: config copy, manifest, metrics stream, timing
/// sidecar and checkpoints. Metrics are flushed as each epoch completes.
pub fn run_training(
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    dataset: Option<&OfflineDataset>,
    pretrained: Option<&GaussianDynamicsEnsemble>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let hash = cfg.hash();
    let mut copy = cfg.clone();
    copy.seeds = vec![seed];
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&copy)?)?;
    let owned;
    let ds = match dataset {
        Some(d) => d,
        None => {
            owned = obtain_dataset(cfg, seed)?;
            &owned
        }
    };
    let fitted;
    let ens = match pretrained {
        Some(e) => e,
        None => {
            fitted = pretrain_ensemble(&cfg.train, ds, seed)?;
            &fitted
        }
    };
    let mut writer = MetricsWriter::create(&dir.join("metrics.jsonl"))?;
    let mut timing = fs::File::create(dir.join("timing.jsonl"))?;
    let start = Instant::now();
    let output = train_with_callback(&cfg.train, ds, seed, ens, &mut |m| {
        writer.write(&MetricsRecord::new(m.epoch, &hash, seed, &m.values))?;
        writeln!(timing, "{}", serde_json::json!({"epoch": m.epoch, "wall_time": start.elapsed().as_secs_f64()}))?;
        Ok(())
    })?;
    let ck = dir.join("checkpoints");
    save_policy(&ck, &output.policy)?;
    save_critics(&ck, &output.critics)?;
    output.ensemble.save(&ck.join("ensemble"))?;
    let manifest = RunManifest {
        config_hash: hash,
        seed,
        code_version: CODE_VERSION.to_string(),
        algo: cfg.train.algo,
        model_update: cfg.train.model_update_mode(),
        dataset_env: ds.meta.env_id.clone(),
        dataset_len: ds.len(),
        epochs_completed: output.metrics.len(),
        diverged: output.diverged,
        divergence: output.divergence.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        manifest,
        output,
    })
}

/// Deterministic-policy return of a finished run directory.
pub fn evaluate_run(dir: &Path, episodes: usize, seed: u64) -> Result<ReturnEstimate> {
    let cfg = ExperimentConfig::load(&dir.join("config.json"))?;
    let policy = load_policy(&dir.join("checkpoints"))?;
    crate::mdp::evaluate_continuous(
        &cfg.env,
        |s, _| {
            let x = ndarray::Array2::from_shape_vec((1, s.len()), s.to_vec()).map_err(|e| LabError::Shape(e.to_string()))?;
            Ok(policy.mean_action(x.view())?.row(0).to_vec())
        },
        episodes.max(1),
        cfg.env.horizon(),
        seed,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    Xi,
    Lambda,
}

impl std::str::FromStr for SweepParam {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xi" => Ok(SweepParam::Xi),
            "lambda" => Ok(SweepParam::Lambda),
            other => Err(LabError::Config(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: f64,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub final_q: f64,
    pub final_return: Option<f64>,
    pub max_grad_norm: f64,
    pub diverged: bool,
}

pub fn apply_sweep_value(cfg: &ExperimentConfig, param: SweepParam, value: f64) -> ExperimentConfig {
    let mut c = cfg.clone();
    match param {
        SweepParam::Xi => c.train.rvl.xi = value,
        SweepParam::Lambda => {
            c.train.algo = Algo::Rambo;
            c.train.model_update = None;
            c.train.adversarial.lambda = value;
        }
    }
    c
}

/// One run per (value, seed). Each seed's dataset and pretrained ensemble
/// are shared across the values, so entries differ only in the swept knob.
pub fn run_sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64], root: &Path) -> Result<Vec<SweepEntry>> {
    if values.is_empty() {
        return Err(LabError::Config("sweep needs at least one value".into()));
    }
    let name = match param {
        SweepParam::Xi => "xi",
        SweepParam::Lambda => "lambda",
    };
    let mut entries = Vec::new();
    for &seed in &cfg.seeds {
        let ds = obtain_dataset(cfg, seed)?;
        let ens = pretrain_ensemble(&cfg.train, &ds, seed)?;
        for &v in values {
            let c = apply_sweep_value(cfg, param, v);
            c.validate()?;
            let dir = root.join(format!("{name}-{v}")).join(format!("seed-{seed}"));
            let out = run_training(&c, seed, &dir, Some(&ds), Some(&ens))?;
            let grad_key = match param {
                SweepParam::Xi => "grad_norm_outer",
                SweepParam::Lambda => "adv_grad_norm_max",
            };
            let max_grad_norm = out
                .output
                .metrics
                .iter()
                .filter_map(|m| m.values.get(grad_key))
                .cloned()
                .filter(|g| g.is_finite())
                .fold(0.0, f64::max);
            entries.push(SweepEntry {
                value: v,
                seed,
                run_dir: dir,
                final_q: out.output.final_metric("q_mean").unwrap_or(f64::NAN),
                final_return: out.output.final_metric("return"),
                max_grad_norm,
                diverged: out.output.diverged,
            });
        }
    }
    fs::write(root.join("sweep.json"), serde_json::to_vec_pretty(&entries)?)?;
    let mut csv = format!("{name},seed,final_q,max_grad_norm,diverged\n");
    for e in &entries {
        csv.push_str(&format!("{},{},{},{},{}\n", e.value, e.seed, e.final_q, e.max_grad_norm, e.diverged));
    }
    fs::write(root.join("sweep_summary.csv"), csv)?;
    Ok(entries)
}

/// Aggregates the metric streams of several run directories and regenerates
/// each run's CSV mirror.
pub fn report(run_dirs: &[PathBuf], out_prefix: &Path, force: bool) -> Result<Vec<AggregateRow>> {
    if run_dirs.is_empty() {
        return Err(LabError::Config("report needs at least one run directory".into()));
    }
    let mut streams = Vec::with_capacity(run_dirs.len());
    for d in run_dirs {
        let recs = read_metrics(&d.join("metrics.jsonl"))?;
        write_metrics_csv(&recs, &d.join("metrics.csv"))?;
        streams.push(recs);
    }
    let rows = aggregate(&streams, force)?;
    if let Some(parent) = out_prefix.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_aggregate_csv(&rows, &out_prefix.with_extension("csv"))?;
    fs::write(out_prefix.with_extension("json"), serde_json::to_vec_pretty(&rows)?)?;
    Ok(rows)
}
