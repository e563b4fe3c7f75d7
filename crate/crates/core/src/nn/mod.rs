//! Function approximators: MLPs, reverse-mode gradients, optimizers and
//! finite-difference oracles.

pub mod gradcheck;
pub mod mlp;
pub mod optim;
pub mod params;

pub use gradcheck::{finite_diff_grad, lipschitz_estimate};
pub use mlp::{Activation, ForwardCache, Mlp, NetSpec, OutputTransform};
pub use optim::{optimizer_step, Optimizer, OptimizerKind};
pub use params::{GradVector, ParamVector, TensorShape};
