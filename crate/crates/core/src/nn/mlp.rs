//! Multi-layer perceptrons with explicit layer-wise reverse accumulation.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{GradVector, ParamVector, TensorShape};
use crate::error::{shape_err, LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
    Swish,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Swish => z * sigmoid(z),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Swish => {
                let sg = sigmoid(z);
                sg + z * sg * (1.0 - sg)
            }
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Transform applied to the last affine layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum OutputTransform {
    Identity,
    /// `tanh(raw) * (hi - lo) / 2 + (lo + hi) / 2`.
    TanhAffine { lo: f64, hi: f64 },
    /// Emits `[mean | log_variance]`; the log-variance half is clamped.
    GaussianHead { min_log_var: f64, max_log_var: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub output_transform: OutputTransform,
}

impl NetSpec {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        hidden_widths: Vec<usize>,
        activation: Activation,
        output_transform: OutputTransform,
    ) -> Result<Self> {
        let spec = NetSpec {
            input_dim,
            output_dim,
            hidden_widths,
            activation,
            output_transform,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(LabError::Domain(format!(
                "network widths must be positive: {:?}",
                self
            )));
        }
        if let OutputTransform::TanhAffine { lo, hi } = self.output_transform {
            if !(lo <= hi) {
                return Err(LabError::Domain(format!("tanh-affine range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Width of the emitted output; gaussian heads emit mean and log-variance.
    pub fn output_width(&self) -> usize {
        match self.output_transform {
            OutputTransform::GaussianHead { .. } => 2 * self.output_dim,
            _ => self.output_dim,
        }
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut prev = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.output_width()));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn manifest(&self) -> Vec<TensorShape> {
        let mut shapes = Vec::new();
        for (l, (i, o)) in self.layer_dims().into_iter().enumerate() {
            shapes.push(TensorShape::new(format!("layer{l}.weight"), vec![i, o]));
            shapes.push(TensorShape::new(format!("layer{l}.bias"), vec![o]));
        }
        shapes
    }

    /// Fan-in scaled uniform initialisation; gaussian heads start with log-variance bias -1.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.num_params());
        let dims = self.layer_dims();
        let last = dims.len() - 1;
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                values.push(rng.random_range(-bound..bound));
            }
            for j in 0..fan_out {
                let b = match self.output_transform {
                    OutputTransform::GaussianHead { .. } if l == last && j >= self.output_dim => -1.0,
                    _ => rng.random_range(-bound..bound),
                };
                values.push(b);
            }
        }
        ParamVector::new(values, self.manifest()).expect("manifest matches parameter count")
    }
}

/// Intermediate values retained by [`Mlp::forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each affine layer (`layer_inputs[0]` is the network input).
    layer_inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre_acts: Vec<Array2<f64>>,
    /// Raw output of the final affine layer.
    raw_out: Array2<f64>,
}

impl ForwardCache {
    pub fn rows(&self) -> usize {
        self.raw_out.nrows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: NetSpec,
    pub params: ParamVector,
}

impl Mlp {
    pub fn new(spec: NetSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.num_params() {
            return Err(shape_err(format!(
                "parameter vector has {} entries, network needs {}",
                params.len(),
                spec.num_params()
            )));
        }
        Ok(Mlp { spec, params })
    }

    pub fn init<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let params = spec.init_params(rng);
        Ok(Mlp { spec, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layer_views(&self) -> Vec<(ArrayView2<'_, f64>, ArrayView1<'_, f64>)> {
        let mut out = Vec::new();
        let mut off = 0;
        let p = self.params.as_slice();
        for (i, o) in self.spec.layer_dims() {
            let w = ArrayView2::from_shape((i, o), &p[off..off + i * o]).expect("weight view");
            off += i * o;
            let b = ArrayView1::from(&p[off..off + o]);
            off += o;
            out.push((w, b));
        }
        out
    }

    fn check_input(&self, input: &ArrayView2<f64>) -> Result<()> {
        if input.ncols() != self.spec.input_dim {
            return Err(shape_err(format!(
                "input has {} columns, network expects {}",
                input.ncols(),
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn forward_cached(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&input)?;
        let layers = self.layer_views();
        let last = layers.len() - 1;
        let mut layer_inputs = Vec::with_capacity(layers.len());
        let mut pre_acts = Vec::with_capacity(last);
        let mut h = input.to_owned();
        let mut raw_out = None;
        for (l, (w, b)) in layers.iter().enumerate() {
            let mut z = h.dot(w);
            z += b;
            layer_inputs.push(h);
            if l == last {
                raw_out = Some(z);
                break;
            }
            let act = self.spec.activation;
            h = z.mapv(|v| act.apply(v));
            pre_acts.push(z);
        }
        let raw_out = raw_out.expect("at least one layer");
        let out = self.transform_output(&raw_out);
        Ok((
            out,
            ForwardCache {
                layer_inputs,
                pre_acts,
                raw_out,
            },
        ))
    }

    fn transform_output(&self, raw: &Array2<f64>) -> Array2<f64> {
        match self.spec.output_transform {
            OutputTransform::Identity => raw.clone(),
            OutputTransform::TanhAffine { lo, hi } => {
                raw.mapv(|r| r.tanh() * (hi - lo) / 2.0 + (lo + hi) / 2.0)
            }
            OutputTransform::GaussianHead {
                min_log_var,
                max_log_var,
            } => {
                let k = self.spec.output_dim;
                let mut out = raw.clone();
                out.slice_mut(s![.., k..])
                    .mapv_inplace(|v| v.clamp(min_log_var, max_log_var));
                out
            }
        }
    }

    fn raw_output_grad(&self, raw: &Array2<f64>, upstream: ArrayView2<f64>) -> Array2<f64> {
        match self.spec.output_transform {
            OutputTransform::Identity => upstream.to_owned(),
            OutputTransform::TanhAffine { lo, hi } => {
                let mut g = upstream.to_owned();
                g.zip_mut_with(raw, |gi, &r| {
                    let t = r.tanh();
                    *gi *= (1.0 - t * t) * (hi - lo) / 2.0;
                });
                g
            }
            OutputTransform::GaussianHead {
                min_log_var,
                max_log_var,
            } => {
                let k = self.spec.output_dim;
                let mut g = upstream.to_owned();
                let raw_lv = raw.slice(s![.., k..]);
                g.slice_mut(s![.., k..]).zip_mut_with(&raw_lv, |gi, &r| {
                    if r < min_log_var || r > max_log_var {
                        *gi = 0.0;
                    }
                });
                g
            }
        }
    }

    /// Reverse-mode gradient of `<output, upstream>` with respect to the
    /// parameters and the input rows.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(GradVector, Array2<f64>)> {
        if upstream.dim() != (cache.rows(), self.spec.output_width()) {
            return Err(shape_err(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.dim(),
                (cache.rows(), self.spec.output_width())
            )));
        }
        let layers = self.layer_views();
        let dims = self.spec.layer_dims();
        let mut grad = vec![0.0; self.num_params()];
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for (i, o) in &dims {
            offsets.push(off);
            off += i * o + o;
        }
        let mut dz = self.raw_output_grad(&cache.raw_out, upstream);
        for l in (0..layers.len()).rev() {
            let (w, _) = &layers[l];
            let (i, o) = dims[l];
            let a = &cache.layer_inputs[l];
            let dw = a.t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            let base = offsets[l];
            for (g, v) in grad[base..base + i * o + o].iter_mut().zip(dw.iter().chain(db.iter())) {
                *g = *v;
            }
            let da = dz.dot(&w.t());
            if l == 0 {
                return Ok((GradVector::new(grad), da));
            }
            let act = self.spec.activation;
            let z = &cache.pre_acts[l - 1];
            let mut next = da;
            next.zip_mut_with(z, |g, &zv| *g *= act.derivative(zv));
            dz = next;
        }
        unreachable!("network has at least one layer")
    }

    /// Convenience wrapper: forward then backward in one call.
    pub fn param_grad(&self, input: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<GradVector> {
        let (_, cache) = self.forward_cached(input)?;
        Ok(self.backward(&cache, upstream)?.0)
    }

    /// Parameter gradient of every row's contribution separately.
    pub fn per_row_param_grads(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<Vec<GradVector>> {
        let rows = cache.rows();
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let single = ForwardCache {
                layer_inputs: cache
                    .layer_inputs
                    .iter()
                    .map(|m| m.slice(s![r..r + 1, ..]).to_owned())
                    .collect(),
                pre_acts: cache
                    .pre_acts
                    .iter()
                    .map(|m| m.slice(s![r..r + 1, ..]).to_owned())
                    .collect(),
                raw_out: cache.raw_out.slice(s![r..r + 1, ..]).to_owned(),
            };
            out.push(self.backward(&single, upstream.slice(s![r..r + 1, ..]))?.0);
        }
        Ok(out)
    }

    /// Forward pass together with the directional derivative of the output
    /// along `direction` in parameter space.
    pub fn jvp(&self, input: ArrayView2<f64>, direction: &[f64]) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_input(&input)?;
        if direction.len() != self.num_params() {
            return Err(shape_err(format!(
                "direction has {} entries, network has {} parameters",
                direction.len(),
                self.num_params()
            )));
        }
        let layers = self.layer_views();
        let last = layers.len() - 1;
        let mut h = input.to_owned();
        let mut dh = Array2::<f64>::zeros(h.dim());
        let mut off = 0;
        for (l, (w, b)) in layers.iter().enumerate() {
            let (i, o) = w.dim();
            let dw = ArrayView2::from_shape((i, o), &direction[off..off + i * o]).expect("weight view");
            off += i * o;
            let db = ArrayView1::from(&direction[off..off + o]);
            off += o;
            let mut z = h.dot(w);
            z += b;
            let mut dz = dh.dot(w) + h.dot(&dw);
            dz += &db;
            if l == last {
                let out = self.transform_output(&z);
                let dout = self.raw_output_grad(&z, dz.view());
                return Ok((out, dout));
            }
            let act = self.spec.activation;
            dz.zip_mut_with(&z, |d, &zv| *d *= act.derivative(zv));
            h = z.mapv(|v| act.apply(v));
            dh = dz;
        }
        unreachable!("network has at least one layer")
    }

    /// Single-row forward returning a flat vector.
    pub fn forward_row(&self, input: &[f64]) -> Result<Array1<f64>> {
        let m = ArrayView2::from_shape((1, input.len()), input).map_err(|e| shape_err(e.to_string()))?;
        Ok(self.forward(m)?.row(0).to_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::finite_diff_grad;
    use crate::rng::seeded;
    use ndarray::array;

    fn linear_1x1(w: f64, b: f64) -> Mlp {
        let spec = NetSpec::new(1, 1, vec![], Activation::Relu, OutputTransform::Identity).unwrap();
        Mlp::new(spec.clone(), ParamVector::new(vec![w, b], spec.manifest()).unwrap()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = NetSpec::new(3, 2, vec![4, 4], Activation::Tanh, OutputTransform::Identity).unwrap();
        let net = Mlp::new(spec.clone(), ParamVector::zeros(&spec)).unwrap();
        let out = net.forward(array![[1.0, -2.0, 3.0]].view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_unit_network() {
        let net = linear_1x1(2.0, 0.5);
        let out = net.forward(array![[3.0]].view()).unwrap();
        assert_eq!(out[[0, 0]], 6.5);
        let g = net.param_grad(array![[3.0]].view(), array![[1.0]].view()).unwrap();
        assert_eq!(g.as_slice(), &[3.0, 1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grad() {
        let spec = NetSpec::new(2, 2, vec![5], Activation::Swish, OutputTransform::Identity).unwrap();
        let net = Mlp::init(spec, &mut seeded(3)).unwrap();
        let g = net
            .param_grad(array![[0.3, -0.1]].view(), Array2::zeros((1, 2)).view())
            .unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = linear_1x1(1.0, 0.0);
        assert!(matches!(
            net.forward(array![[1.0, 2.0]].view()),
            Err(LabError::Shape(_))
        ));
    }

    #[test]
    fn batch_rows_are_independent() {
        let spec = NetSpec::new(2, 3, vec![6, 6], Activation::Swish, OutputTransform::Identity).unwrap();
        let net = Mlp::init(spec, &mut seeded(9)).unwrap();
        let batch = array![[0.1, 0.2], [-0.7, 1.5]];
        let out = net.forward(batch.view()).unwrap();
        for r in 0..2 {
            let single = net.forward(batch.slice(s![r..r + 1, ..])).unwrap();
            assert_eq!(single.row(0), out.row(r));
        }
    }

    #[test]
    fn backward_matches_finite_differences_two_hidden_layers() {
        let spec = NetSpec::new(2, 1, vec![1, 2], Activation::Tanh, OutputTransform::Identity).unwrap();
        assert_eq!(spec.num_params(), 10);
        let net = Mlp::init(spec.clone(), &mut seeded(1)).unwrap();
        let x = array![[0.4, -1.2], [0.9, 0.3]];
        let up = array![[1.0], [-0.5]];
        let g = net.param_grad(x.view(), up.view()).unwrap();
        let fd = finite_diff_grad(
            |p| {
                let m = Mlp::new(spec.clone(), ParamVector::new(p.to_vec(), spec.manifest()).unwrap()).unwrap();
                let o = m.forward(x.view()).unwrap();
                (&o * &up).sum()
            },
            net.params.as_slice(),
            1e-5,
        )
        .unwrap();
        assert!(g.relative_error(&fd) <= 1e-6, "rel err {}", g.relative_error(&fd));
    }

    #[test]
    fn jvp_matches_gradient_projection() {
        let spec = NetSpec::new(
            3,
            2,
            vec![5, 4],
            Activation::Swish,
            OutputTransform::GaussianHead {
                min_log_var: -10.0,
                max_log_var: 4.0,
            },
        )
        .unwrap();
        let net = Mlp::init(spec, &mut seeded(11)).unwrap();
        let x = array![[0.2, -0.4, 1.0], [1.5, 0.3, -0.8]];
        let dir = crate::rng::normal_vec(&mut seeded(12), net.num_params());
        let up = array![[0.3, -1.0, 0.5, 2.0], [1.0, 0.1, -0.2, 0.7]];
        let g = net.param_grad(x.view(), up.view()).unwrap();
        let (_, dout) = net.jvp(x.view(), &dir).unwrap();
        let lhs: f64 = (&dout * &up).sum();
        let rhs: f64 = g.as_slice().iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
    }

    #[test]
    fn gaussian_head_clamps_log_variance() {
        let spec = NetSpec::new(
            1,
            1,
            vec![],
            Activation::Swish,
            OutputTransform::GaussianHead {
                min_log_var: -10.0,
                max_log_var: 4.0,
            },
        )
        .unwrap();
        // weights [w_mean, w_lv], biases [b_mean, b_lv]
        let params = ParamVector::new(vec![1.0, 100.0, 0.0, 0.0], spec.manifest()).unwrap();
        let net = Mlp::new(spec, params).unwrap();
        let out = net.forward(array![[1.0], [-1.0]].view()).unwrap();
        assert_eq!(out[[0, 1]], 4.0);
        assert_eq!(out[[1, 1]], -10.0);
    }

    #[test]
    fn tanh_affine_output_in_range() {
        let spec = NetSpec::new(1, 1, vec![], Activation::Tanh, OutputTransform::TanhAffine { lo: 0.5, hi: 2.0 })
            .unwrap();
        let net = Mlp::new(spec.clone(), ParamVector::new(vec![0.0, 0.0], spec.manifest()).unwrap()).unwrap();
        let out = net.forward(array![[7.0]].view()).unwrap();
        assert!((out[[0, 0]] - 1.25).abs() < 1e-15);
    }
}
