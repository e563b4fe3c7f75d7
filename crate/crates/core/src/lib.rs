//! Desk-scale laboratory for robust value-aware model learning in
//! model-based offline reinforcement learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`mdp`]: environments, behaviour policies, offline datasets and exact
//!   tabular evaluation.
//! - [`nn`]: MLPs with hand-written reverse-mode gradients and optimizers.
//! - [`dynamics`]: the Gaussian dynamics ensemble and branched rollouts.
//! - [`rvl`]: state uncertainty sets and the robust value-aware loss.
//! - [`bilevel`]: the adaptive weighting network and its implicit gradient.
//! - [`sac`]: soft actor-critic and the training loop.
//! - [`rambo`]: the adversarial model-gradient baseline.
//! - [`oracle`]: brute-force verifiers on enumerable instances.
//! - [`harness`]: configuration, metrics and the command-line front end.

pub mod bilevel;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod nn;
pub mod oracle;
pub mod rambo;
pub mod rng;
pub mod rvl;
pub mod sac;

pub use error::{LabError, Result};
