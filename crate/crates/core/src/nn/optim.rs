use serde::{Deserialize, Serialize};

use super::params::GradVector;
use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    PlainGradientDescent,
    AdaptiveMoment,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state owned by exactly one trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, num_params: usize) -> Self {
        let moments = match kind {
            OptimizerKind::PlainGradientDescent => 0,
            OptimizerKind::AdaptiveMoment => num_params,
        };
        Optimizer {
            kind,
            lr,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
            steps: 0,
        }
    }

    pub fn adam(lr: f64, num_params: usize) -> Self {
        Optimizer::new(OptimizerKind::AdaptiveMoment, lr, num_params)
    }

    pub fn sgd(lr: f64) -> Self {
        Optimizer::new(OptimizerKind::PlainGradientDescent, lr, 0)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update to `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &GradVector) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(LabError::Domain(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if grad.len() != params.len() {
            return Err(LabError::Shape(format!(
                "gradient has {} entries, parameters {}",
                grad.len(),
                params.len()
            )));
        }
        if !grad.is_finite() {
            return Err(LabError::NonFinite("optimizer received a non-finite gradient".into()));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::PlainGradientDescent => {
                for (p, g) in params.iter_mut().zip(grad.as_slice()) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::AdaptiveMoment => {
                if self.first_moment.len() != params.len() {
                    self.first_moment = vec![0.0; params.len()];
                    self.second_moment = vec![0.0; params.len()];
                }
                let t = self.steps as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for i in 0..params.len() {
                    let g = grad.as_slice()[i];
                    let m = ADAM_BETA1 * self.first_moment[i] + (1.0 - ADAM_BETA1) * g;
                    let v = ADAM_BETA2 * self.second_moment[i] + (1.0 - ADAM_BETA2) * g * g;
                    self.first_moment[i] = m;
                    self.second_moment[i] = v;
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    params[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
        Ok(())
    }
}

/// Functional form: returns the updated parameters and optimizer state.
pub fn optimizer_step(
    mut state: Optimizer,
    params: &[f64],
    grad: &GradVector,
) -> Result<(Vec<f64>, Optimizer)> {
    if !(state.lr > 0.0) {
        return Err(LabError::Domain(format!("learning rate must be > 0, got {}", state.lr)));
    }
    let mut p = params.to_vec();
    state.step(&mut p, grad)?;
    Ok((p, state))
}
