//! Adversarial model-gradient baseline and the lambda sweep.

pub mod adversarial;
pub mod sweep;

pub use adversarial::{adversarial_loss, adversarial_loss_with, draw_adversarial, AdversarialConfig, AdversarialDraws, AdversarialOutcome};
pub use sweep::{lambda_sweep, LambdaEntry, SweepReport, DEFAULT_LAMBDAS};
