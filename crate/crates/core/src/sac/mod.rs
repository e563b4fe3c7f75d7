//! Soft actor-critic on mixed real and model-generated batches.

mod batch;
mod critic;
mod policy;
mod train;

pub use batch::mixed_batch;
pub use critic::{actor_loss_grad, critic_loss_grad, target_value, EntropyCoef, SacValue, TwinCritics};
pub use policy::{policy_noise, GaussianPolicy, PolicySample, MAX_LOG_STD, MIN_LOG_STD};
pub use train::{
    evaluate_policy, pretrain_ensemble, reference_returns, train_romi, train_with_callback, train_with_pretrained, Algo, EpochMetrics, ModelUpdate,
    SacSchedule, TrainConfig, TrainOutput,
};
