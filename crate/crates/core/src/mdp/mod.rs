//! Environments, behaviour policies, offline datasets and exact evaluation.

pub mod continuous;
pub mod dataset;
pub mod eval;
pub mod policy;
pub mod tabular;

pub use continuous::{ContinuousEnv, LinearGaussian, PointMass};
pub use dataset::{batch_arrays, generate_dataset, DatasetMeta, Environment, OfflineDataset, Transition};
pub use eval::{evaluate_continuous, evaluate_tabular, normalized_score, ReturnEstimate};
pub use policy::{BehaviorKind, BehaviorPolicy};
pub use tabular::{evaluate_policy_exact, fixed_point_q, value_iteration, Backup, TabularMDP};
