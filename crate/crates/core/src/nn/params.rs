//! Flat parameter and gradient vectors, plus on-disk checkpoints.
//!
//! A checkpoint is a pair of files: `<stem>.bin` holding the parameters as
//! little-endian `f64` values, and `<stem>.json` holding the shape manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::NetSpec;
use crate::error::{shape_err, LabError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub dims: Vec<usize>,
}

impl TensorShape {
    pub fn new(name: impl Into<String>, dims: Vec<usize>) -> Self {
        TensorShape {
            name: name.into(),
            dims,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    manifest: Vec<TensorShape>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, manifest: Vec<TensorShape>) -> Result<Self> {
        let expected: usize = manifest.iter().map(TensorShape::len).sum();
        if expected != values.len() {
            return Err(shape_err(format!(
                "manifest describes {expected} values, got {}",
                values.len()
            )));
        }
        Ok(ParamVector { values, manifest })
    }

    pub fn zeros(spec: &NetSpec) -> Self {
        ParamVector {
            values: vec![0.0; spec.num_params()],
            manifest: spec.manifest(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn manifest(&self) -> &[TensorShape] {
        &self.manifest
    }

    /// Split into per-tensor chunks following the manifest.
    pub fn unflatten(&self) -> Vec<(TensorShape, Vec<f64>)> {
        let mut off = 0;
        self.manifest
            .iter()
            .map(|shape| {
                let chunk = self.values[off..off + shape.len()].to_vec();
                off += shape.len();
                (shape.clone(), chunk)
            })
            .collect()
    }

    pub fn flatten(parts: Vec<(TensorShape, Vec<f64>)>) -> Result<Self> {
        let mut values = Vec::new();
        let mut manifest = Vec::new();
        for (shape, chunk) in parts {
            if shape.len() != chunk.len() {
                return Err(shape_err(format!("tensor {} has wrong length", shape.name)));
            }
            values.extend(chunk);
            manifest.push(shape);
        }
        Ok(ParamVector { values, manifest })
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values, self.manifest.clone())
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(stem.with_extension("bin"), bytes)?;
        fs::write(
            stem.with_extension("json"),
            serde_json::to_vec_pretty(&self.manifest)?,
        )?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let bytes = fs::read(stem.with_extension("bin"))?;
        let manifest: Vec<TensorShape> = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
        if bytes.len() % 8 != 0 {
            return Err(LabError::Shape("checkpoint length is not a multiple of 8".into()));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        ParamVector::new(values, manifest)
    }
}

/// Gradient congruent with a [`ParamVector`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradVector(Vec<f64>);

impl GradVector {
    pub fn new(values: Vec<f64>) -> Self {
        GradVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        GradVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &GradVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add_scaled(&mut self, other: &GradVector, factor: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `||self - other|| / max(||other||, tiny)`.
    pub fn relative_error(&self, other: &GradVector) -> f64 {
        let diff: f64 = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / other.norm().max(1e-12)
    }
}

impl From<Vec<f64>> for GradVector {
    fn from(v: Vec<f64>) -> Self {
        GradVector(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mlp::{Activation, OutputTransform};
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let spec = NetSpec::new(3, 2, vec![5], Activation::Swish, OutputTransform::Identity).unwrap();
        let mut p = spec.init_params(&mut seeded(11));
        p.as_mut_slice()[0] = f64::MIN_POSITIVE / 3.0;
        p.as_mut_slice()[1] = -0.0;
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("net");
        p.save(&stem).unwrap();
        let back = ParamVector::load(&stem).unwrap();
        let a: Vec<u64> = p.as_slice().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.as_slice().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(p.manifest(), back.manifest());
    }

    #[test]
    fn mismatched_manifest_rejected() {
        let err = ParamVector::new(vec![1.0; 3], vec![TensorShape::new("w", vec![2, 2])]);
        assert!(matches!(err, Err(LabError::Shape(_))));
    }

    proptest! {
        #[test]
        fn unflatten_then_flatten_is_identity(seed in 0u64..1000, hidden in 1usize..6) {
            let spec = NetSpec::new(2, 3, vec![hidden, hidden + 1], Activation::Tanh, OutputTransform::Identity).unwrap();
            let p = spec.init_params(&mut seeded(seed));
            let back = ParamVector::flatten(p.unflatten()).unwrap();
            let a: Vec<u64> = p.as_slice().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.as_slice().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
