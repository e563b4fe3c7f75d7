//! The adaptive sample-weighting network.

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::TransitionBatch;
use crate::error::{LabError, Result};
use crate::nn::{Activation, ForwardCache, GradVector, Mlp, NetSpec, OutputTransform};

/// `tanh(raw) * (b - a) / 2 + (a + b) / 2`.
pub fn weight_map(raw: f64, a: f64, b: f64) -> Result<f64> {
    if !(a <= b) {
        return Err(LabError::Domain(format!("weight range [{a}, {b}] is empty")));
    }
    Ok(raw.tanh() * (b - a) / 2.0 + (a + b) / 2.0)
}

/// Maps `(s, a, s')` to a weight in `[range_lo, range_hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightingNet {
    pub net: Mlp,
    pub range_lo: f64,
    pub range_hi: f64,
}

impl WeightingNet {
    pub fn init<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: Vec<usize>,
        range: (f64, f64),
        rng: &mut R,
    ) -> Result<Self> {
        let (lo, hi) = range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(LabError::Domain(format!("weight range must satisfy 0 < a <= b, got [{lo}, {hi}]")));
        }
        let spec = NetSpec::new(
            2 * state_dim + action_dim,
            1,
            hidden,
            Activation::Tanh,
            OutputTransform::TanhAffine { lo, hi },
        )?;
        Ok(WeightingNet {
            net: Mlp::init(spec, rng)?,
            range_lo: lo,
            range_hi: hi,
        })
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    pub fn params(&self) -> &[f64] {
        self.net.params.as_slice()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params.as_mut_slice()
    }

    pub fn with_params(&self, values: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.net.params = self.net.params.with_values(values.to_vec())?;
        Ok(out)
    }

    fn inputs(batch: &TransitionBatch) -> Array2<f64> {
        concatenate(
            Axis(1),
            &[batch.states.view(), batch.actions.view(), batch.next_states.view()],
        )
        .expect("batch rows agree")
    }

    pub fn weights(&self, batch: &TransitionBatch) -> Result<Array1<f64>> {
        Ok(self.weights_cached(batch)?.0)
    }

    pub(crate) fn weights_cached(&self, batch: &TransitionBatch) -> Result<(Array1<f64>, ForwardCache)> {
        let (out, cache) = self.net.forward_cached(Self::inputs(batch).view())?;
        let w = out.column(0).to_owned();
        if let Some(bad) = w.iter().find(|v| !(**v >= self.range_lo && **v <= self.range_hi)) {
            return Err(LabError::Divergence(format!("weight {bad} escaped its range")));
        }
        Ok((w, cache))
    }

    /// `grad_nu sum_i coef_i w_nu(s_i, a_i, s'_i)`.
    pub(crate) fn weighted_param_grad(&self, cache: &ForwardCache, coef: &Array1<f64>) -> Result<GradVector> {
        let up = coef.clone().insert_axis(Axis(1));
        Ok(self.net.backward(cache, up.view())?.0)
    }
}
