//! Adaptive sample weighting trained through a one-step implicit gradient.

pub mod round;
pub mod weighting;

pub use round::{
    bilevel_round, inner_step, inner_step_capped, outer_implicit_grad, BilevelState, InnerRecord, OuterBatch, OuterResult, RoundRecord,
};
pub use weighting::{weight_map, WeightingNet};
