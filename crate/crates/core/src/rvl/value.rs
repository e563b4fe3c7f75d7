//! Value functions consumed by the RVL loss.
//!
//! A value function may be stochastic (for example the soft state value of a
//! sampled action). Its randomness is passed in explicitly as a noise matrix
//! so that losses can be re-evaluated at frozen draws.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::error::{shape_err, Result};
use crate::nn::Mlp;
use crate::rng::normal_matrix;

pub trait ValueFunction {
    fn state_dim(&self) -> usize;

    /// Columns of standard-normal noise consumed per state row.
    fn noise_dim(&self) -> usize {
        0
    }

    fn eval(&self, states: ArrayView2<f64>, noise: ArrayView2<f64>) -> Result<Array1<f64>>;

    /// Values together with `dV/ds` for every row.
    fn eval_with_state_grad(&self, states: ArrayView2<f64>, noise: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)>;
}

pub fn draw_value_noise<R: Rng + ?Sized>(v: &dyn ValueFunction, rows: usize, rng: &mut R) -> Array2<f64> {
    if v.noise_dim() == 0 {
        Array2::zeros((rows, 0))
    } else {
        normal_matrix(rng, rows, v.noise_dim())
    }
}

fn check(v: &dyn ValueFunction, states: &ArrayView2<f64>) -> Result<()> {
    if states.ncols() != v.state_dim() {
        return Err(shape_err(format!(
            "value function expects {} state columns, got {}",
            v.state_dim(),
            states.ncols()
        )));
    }
    Ok(())
}

/// `V(s) = w . s + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearValue {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ValueFunction for LinearValue {
    fn state_dim(&self) -> usize {
        self.weights.len()
    }

    fn eval(&self, states: ArrayView2<f64>, _noise: ArrayView2<f64>) -> Result<Array1<f64>> {
        check(self, &states)?;
        Ok(states.dot(&Array1::from(self.weights.clone())) + self.bias)
    }

    fn eval_with_state_grad(&self, states: ArrayView2<f64>, noise: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let v = self.eval(states, noise)?;
        let g = Array2::from_shape_fn(states.dim(), |(_, j)| self.weights[j]);
        Ok((v, g))
    }
}

/// Deterministic value given by a closure and its gradient.
pub struct FnValue<F, G> {
    pub dim: usize,
    pub value: F,
    pub grad: G,
}

impl<F, G> ValueFunction for FnValue<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, states: ArrayView2<f64>, _noise: ArrayView2<f64>) -> Result<Array1<f64>> {
        check(self, &states)?;
        Ok(states.rows().into_iter().map(|r| (self.value)(&r.to_vec())).collect())
    }

    fn eval_with_state_grad(&self, states: ArrayView2<f64>, noise: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let v = self.eval(states, noise)?;
        let mut g = Array2::zeros(states.dim());
        for (i, r) in states.rows().into_iter().enumerate() {
            let gi = (self.grad)(&r.to_vec());
            for (j, x) in gi.into_iter().enumerate() {
                g[[i, j]] = x;
            }
        }
        Ok((v, g))
    }
}

/// Scalar-output network used directly as `V(s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpValue(pub Mlp);

impl ValueFunction for MlpValue {
    fn state_dim(&self) -> usize {
        self.0.spec.input_dim
    }

    fn eval(&self, states: ArrayView2<f64>, _noise: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.0.forward(states)?.column(0).to_owned())
    }

    fn eval_with_state_grad(&self, states: ArrayView2<f64>, _noise: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let (out, cache) = self.0.forward_cached(states)?;
        let up = Array2::ones((states.nrows(), 1));
        let (_, dx) = self.0.backward(&cache, up.view())?;
        Ok((out.column(0).to_owned(), dx))
    }
}
