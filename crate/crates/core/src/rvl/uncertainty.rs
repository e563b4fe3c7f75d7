//! State uncertainty sets and robust value targets.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::value::{draw_value_noise, ValueFunction};
use crate::error::{LabError, Result};
use crate::rng::normal_vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    EuclideanBall,
    PerDimBox,
}

impl Metric {
    pub fn distance(self, x: &[f64], y: &[f64]) -> f64 {
        let d = x.iter().zip(y).map(|(a, b)| a - b);
        match self {
            Metric::EuclideanBall => d.map(|v| v * v).sum::<f64>().sqrt(),
            Metric::PerDimBox => d.map(f64::abs).fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySetSpec {
    pub xi: f64,
    pub num_samples: usize,
    pub metric: Metric,
    pub include_center: bool,
}

impl Default for UncertaintySetSpec {
    fn default() -> Self {
        UncertaintySetSpec {
            xi: 0.1,
            num_samples: 10,
            metric: Metric::EuclideanBall,
            include_center: true,
        }
    }
}

impl UncertaintySetSpec {
    pub fn new(xi: f64, num_samples: usize, metric: Metric, include_center: bool) -> Result<Self> {
        let spec = UncertaintySetSpec {
            xi,
            num_samples,
            metric,
            include_center,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi >= 0.0) || !self.xi.is_finite() {
            return Err(LabError::Domain(format!("xi must be finite and >= 0, got {}", self.xi)));
        }
        if self.num_samples == 0 {
            return Err(LabError::Domain("uncertainty set needs at least one sample".into()));
        }
        Ok(())
    }
}

/// One perturbation of scale at most `xi` under `metric`.
pub fn sample_offset<R: Rng + ?Sized>(dim: usize, xi: f64, metric: Metric, rng: &mut R) -> Vec<f64> {
    match metric {
        Metric::EuclideanBall => {
            let mut dir = normal_vec(rng, dim);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let u: f64 = rng.random();
            let radius = xi * u.powf(1.0 / dim as f64);
            if norm > 0.0 {
                dir.iter_mut().for_each(|v| *v *= radius / norm);
            }
            dir
        }
        Metric::PerDimBox => (0..dim).map(|_| xi * (2.0 * rng.random::<f64>() - 1.0)).collect(),
    }
}

/// `N` states within distance `xi` of `s_prime`; with `include_center` the
/// first one is `s_prime` itself.
pub fn sample_uncertainty_set<R: Rng + ?Sized>(
    s_prime: &[f64],
    spec: &UncertaintySetSpec,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.num_samples);
    if spec.include_center {
        out.push(s_prime.to_vec());
    }
    while out.len() < spec.num_samples {
        let off = sample_offset(s_prime.len(), spec.xi, spec.metric, rng);
        out.push(s_prime.iter().zip(off).map(|(s, o)| s + o).collect());
    }
    Ok(out)
}

/// `min_i V(s~_i)` over a freshly sampled uncertainty set around `s_prime`.
pub fn min_value_target<R: Rng + ?Sized>(
    value: &dyn ValueFunction,
    s_prime: &[f64],
    spec: &UncertaintySetSpec,
    rng: &mut R,
) -> Result<f64> {
    let sp = Array2::from_shape_vec((1, s_prime.len()), s_prime.to_vec()).map_err(|e| LabError::Shape(e.to_string()))?;
    Ok(min_value_targets(value, sp.view(), spec, rng)?[0])
}

/// Row-wise robust targets for a batch of next states.
pub fn min_value_targets<R: Rng + ?Sized>(
    value: &dyn ValueFunction,
    next_states: ArrayView2<f64>,
    spec: &UncertaintySetSpec,
    rng: &mut R,
) -> Result<Array1<f64>> {
    spec.validate()?;
    let (n, k) = next_states.dim();
    let big_n = spec.num_samples;
    let mut cands = Array2::zeros((n * big_n, k));
    for i in 0..n {
        let row = next_states.row(i).to_vec();
        for (c, s) in sample_uncertainty_set(&row, spec, rng)?.into_iter().enumerate() {
            cands.row_mut(i * big_n + c).assign(&ArrayView1::from(&s));
        }
    }
    let noise = draw_value_noise(value, n * big_n, rng);
    let vals = value.eval(cands.view(), noise.view())?;
    Ok(Array1::from_shape_fn(n, |i| {
        vals.slice(ndarray::s![i * big_n..(i + 1) * big_n])
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }))
}

/// Minimum of `values` over the members of a candidate pool that lie within
/// `xi` of `center`. The center itself is always admissible.
pub fn min_over_pool(center_value: f64, center: &[f64], pool: &[Vec<f64>], pool_values: &[f64], xi: f64, metric: Metric) -> f64 {
    pool.iter()
        .zip(pool_values)
        .filter(|(p, _)| metric.distance(p, center) <= xi)
        .map(|(_, v)| *v)
        .fold(center_value, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::rvl::value::LinearValue;
    use proptest::prelude::*;

    #[test]
    fn zero_radius_collapses_to_center() {
        let spec = UncertaintySetSpec::new(0.0, 5, Metric::EuclideanBall, false).unwrap();
        for s in sample_uncertainty_set(&[1.0, -2.0], &spec, &mut seeded(1)).unwrap() {
            assert_eq!(s, vec![1.0, -2.0]);
        }
    }

    #[test]
    fn ball_is_filled_to_its_boundary() {
        let spec = UncertaintySetSpec::new(1.0, 10_000, Metric::EuclideanBall, false).unwrap();
        let c = [0.5, 0.5, -1.0];
        let samples = sample_uncertainty_set(&c, &spec, &mut seeded(2)).unwrap();
        let max = samples
            .iter()
            .map(|s| Metric::EuclideanBall.distance(s, &c))
            .fold(0.0, f64::max);
        assert!((0.99..=1.0 + 1e-12).contains(&max), "{max}");
    }

    #[test]
    fn box_samples_respect_box() {
        let spec = UncertaintySetSpec::new(0.3, 1000, Metric::PerDimBox, false).unwrap();
        for s in sample_uncertainty_set(&[0.0, 1.0], &spec, &mut seeded(3)).unwrap() {
            assert!(s[0].abs() <= 0.3 && (s[1] - 1.0).abs() <= 0.3);
        }
    }

    #[test]
    fn single_centered_sample_is_center() {
        let spec = UncertaintySetSpec::new(2.0, 1, Metric::EuclideanBall, true).unwrap();
        assert_eq!(sample_uncertainty_set(&[3.0], &spec, &mut seeded(4)).unwrap(), vec![vec![3.0]]);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(UncertaintySetSpec::new(-0.1, 1, Metric::EuclideanBall, true).is_err());
        assert!(UncertaintySetSpec::new(0.1, 0, Metric::EuclideanBall, true).is_err());
    }

    #[test]
    fn linear_value_ball_minimum() {
        let v = LinearValue {
            weights: vec![1.0],
            bias: 0.0,
        };
        let spec = UncertaintySetSpec::new(0.5, 10, Metric::EuclideanBall, true).unwrap();
        let m = min_value_target(&v, &[1.0], &spec, &mut seeded(5)).unwrap();
        assert!((0.5..=1.0).contains(&m));
        let many = UncertaintySetSpec::new(0.5, 20_000, Metric::EuclideanBall, true).unwrap();
        let m = min_value_target(&v, &[1.0], &many, &mut seeded(6)).unwrap();
        assert!((m - 0.5).abs() < 1e-3);
        let zero = UncertaintySetSpec::new(0.0, 10, Metric::EuclideanBall, true).unwrap();
        assert_eq!(min_value_target(&v, &[1.0], &zero, &mut seeded(6)).unwrap(), 1.0);
    }

    #[test]
    fn constant_value_ignores_the_set() {
        let v = LinearValue {
            weights: vec![0.0, 0.0],
            bias: 3.5,
        };
        let spec = UncertaintySetSpec::new(4.0, 50, Metric::PerDimBox, false).unwrap();
        assert_eq!(min_value_target(&v, &[1.0, 1.0], &spec, &mut seeded(7)).unwrap(), 3.5);
    }

    proptest! {
        #[test]
        fn centered_target_never_exceeds_center_value(
            w in prop::collection::vec(-3.0f64..3.0, 2),
            c in prop::collection::vec(-2.0f64..2.0, 2),
            xi in 0.0f64..2.0,
            n in 1usize..20,
            seed in 0u64..1000,
        ) {
            let v = LinearValue { weights: w.clone(), bias: 0.0 };
            let spec = UncertaintySetSpec::new(xi, n, Metric::EuclideanBall, true).unwrap();
            let m = min_value_target(&v, &c, &spec, &mut seeded(seed)).unwrap();
            let center = w[0] * c[0] + w[1] * c[1];
            prop_assert!(m <= center);
        }

        #[test]
        fn pool_minimum_is_monotone_in_radius(
            seed in 0u64..1000,
            xis in prop::collection::vec(0.0f64..1.5, 2..6),
        ) {
            let mut rng = seeded(seed);
            let center = [0.2, -0.1];
            let pool: Vec<Vec<f64>> = (0..200)
                .map(|_| {
                    let o = sample_offset(2, 1.5, Metric::EuclideanBall, &mut rng);
                    vec![center[0] + o[0], center[1] + o[1]]
                })
                .collect();
            let f = |s: &[f64]| (3.0 * s[0]).sin() + s[1] * s[1];
            let vals: Vec<f64> = pool.iter().map(|s| f(s)).collect();
            let mut xis = xis;
            xis.sort_by(f64::total_cmp);
            let mins: Vec<f64> = xis
                .iter()
                .map(|&xi| min_over_pool(f(&center), &center, &pool, &vals, xi, Metric::EuclideanBall))
                .collect();
            for w in mins.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
        }
    }
}
