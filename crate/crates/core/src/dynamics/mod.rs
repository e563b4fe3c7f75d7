//! Ensemble Gaussian dynamics models.

pub mod buffer;
pub mod ensemble;
pub mod member;

pub use buffer::{rollout, rollout_step, start_states, ModelBuffer, RolloutStats};
pub use ensemble::{multi_step_error, pretrain_mle, GaussianDynamicsEnsemble, PretrainConfig, PretrainReport};
pub use member::{
    log_prob_grad, nll_loss, sample_next, step_rate, weighted_nll, GaussianMember, Prediction, ReparamCache, TransitionBatch,
    MAX_LOG_VAR, MIN_LOG_VAR,
};
