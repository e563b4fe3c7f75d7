use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::GaussianDynamicsEnsemble;
use crate::error::{LabError, Result};
use crate::mdp::OfflineDataset;
use crate::sac::{train_with_pretrained, Algo, EpochMetrics, TrainConfig};

/// Adversarial weights swept by default.
pub const DEFAULT_LAMBDAS: [f64; 5] = [0.0, 3e-4, 5e-3, 5e-2, 1e-1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaEntry {
    pub lambda: f64,
    pub final_q: f64,
    pub max_grad_norm: f64,
    pub diverged: bool,
    pub q_series: Vec<f64>,
    pub grad_norm_series: Vec<f64>,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub entries: Vec<LambdaEntry>,
}

impl SweepReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("lambda,final_q,max_grad_norm,diverged\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{},{}\n", e.lambda, e.final_q, e.max_grad_norm, e.diverged));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Train the adversarial baseline once per lambda from a shared pretrained
/// ensemble and summarise Q estimates and adversarial gradient norms.
pub fn lambda_sweep(
    base: &TrainConfig,
    dataset: &OfflineDataset,
    pretrained: &GaussianDynamicsEnsemble,
    lambdas: &[f64],
    seed: u64,
) -> Result<SweepReport> {
    if lambdas.is_empty() {
        return Err(LabError::Config("lambda sweep needs at least one value".into()));
    }
    let mut entries = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut cfg = base.clone();
        cfg.algo = Algo::Rambo;
        cfg.model_update = None;
        cfg.adversarial.lambda = lambda;
        let out = train_with_pretrained(&cfg, dataset, seed, pretrained)?;
        let series = |k: &str| -> Vec<f64> {
            out.metrics.iter().map(|m| m.values.get(k).copied().unwrap_or(f64::NAN)).collect()
        };
        let q_series = series("q_mean");
        let grad_norm_series = series("adv_grad_norm_max");
        let max_grad_norm = grad_norm_series.iter().copied().filter(|g| !g.is_nan()).fold(0.0, f64::max);
        entries.push(LambdaEntry {
            lambda,
            final_q: q_series.last().copied().unwrap_or(f64::NAN),
            max_grad_norm,
            diverged: out.diverged,
            q_series,
            grad_norm_series,
            metrics: out.metrics,
        });
    }
    Ok(SweepReport { seed, entries })
}
