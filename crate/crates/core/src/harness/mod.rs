//! Experiment configuration, run directories, metric streams and reports.

mod config;
mod metrics;
mod run;

pub use config::{ExperimentConfig, CODE_VERSION};
pub use metrics::{aggregate, read_metrics, write_aggregate_csv, write_metrics_csv, AggregateRow, MetricsRecord, MetricsWriter};
pub use run::{
    apply_sweep_value, evaluate_run, load_policy, obtain_dataset, out_root, report, run_sweep, run_training, save_critics,
    save_policy, RunManifest, RunOutcome, SweepEntry, SweepParam, DEFAULT_OUT, OUT_ENV,
};
