//! State uncertainty sets, the robust value-aware loss and its diagnostics.

pub mod diagnostics;
pub mod loss;
pub mod uncertainty;
pub mod value;

pub use diagnostics::{compute_epsilons, EpsilonConfig, RvlDiagnostics};
pub use loss::{draw_rvl, rvl_loss, rvl_loss_with, RvlDraws};
pub use uncertainty::{
    min_over_pool, min_value_target, min_value_targets, sample_offset, sample_uncertainty_set, Metric,
    UncertaintySetSpec,
};
pub use value::{draw_value_noise, FnValue, LinearValue, MlpValue, ValueFunction};
