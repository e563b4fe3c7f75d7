//! Exact robust minima over a Wasserstein ball on a finite support.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

const PROB_TOL: f64 = 1e-9;
const METRIC_TOL: f64 = 1e-12;
/// Required agreement between the dual and primal computations.
pub const CROSS_CHECK_TOL: f64 = 1e-6;
/// Number of dual grid points.
pub const DUAL_GRID: usize = 10_000;
/// Slack allowed in the sandwich inequalities.
pub const SANDWICH_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WassersteinBallProblem {
    pub nominal: Vec<f64>,
    pub values: Vec<f64>,
    /// Row-major `n x n` ground metric.
    pub metric: Vec<Vec<f64>>,
    pub xi: f64,
}

impl WassersteinBallProblem {
    pub fn new(nominal: Vec<f64>, values: Vec<f64>, metric: Vec<Vec<f64>>, xi: f64) -> Result<Self> {
        let p = WassersteinBallProblem {
            nominal,
            values,
            metric,
            xi,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.nominal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nominal.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nominal.len();
        if n == 0 || self.values.len() != n || self.metric.len() != n || self.metric.iter().any(|r| r.len() != n) {
            return Err(LabError::Shape(format!("problem needs matching sizes, nominal has {n} entries")));
        }
        if self.nominal.iter().any(|p| !(*p >= 0.0)) || (self.nominal.iter().sum::<f64>() - 1.0).abs() > PROB_TOL {
            return Err(LabError::Domain("nominal must be a probability vector".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite("values must be finite".into()));
        }
        if !(self.xi >= 0.0) || !self.xi.is_finite() {
            return Err(LabError::Domain(format!("xi must be finite and >= 0, got {}", self.xi)));
        }
        let d = &self.metric;
        for i in 0..n {
            if d[i][i] != 0.0 {
                return Err(LabError::Domain(format!("metric diagonal d({i},{i}) = {}", d[i][i])));
            }
            for j in 0..n {
                if !(d[i][j] >= 0.0) || !d[i][j].is_finite() || (d[i][j] - d[j][i]).abs() > METRIC_TOL {
                    return Err(LabError::Domain(format!("metric entry ({i},{j}) is negative or asymmetric")));
                }
                for k in 0..n {
                    if d[i][k] > d[i][j] + d[j][k] + METRIC_TOL {
                        return Err(LabError::Domain(format!("triangle inequality fails at ({i},{j},{k})")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn nominal_expectation(&self) -> f64 {
        self.nominal.iter().zip(&self.values).map(|(p, v)| p * v).sum()
    }

    /// Random instance: points in the plane give the metric, values are
    /// uniform in `[-1, 1]`, and `xi` ranges up to slightly past the diameter.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_states: usize) -> Self {
        let n = rng.random_range(1..=max_states.max(1));
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
        let metric: Vec<Vec<f64>> = pts
            .iter()
            .map(|a| pts.iter().map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()).collect())
            .collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        let nominal = raw.iter().map(|x| x / total).collect();
        let values = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let diameter = metric.iter().flatten().cloned().fold(0.0, f64::max);
        let xi = if rng.random::<f64>() < 0.1 { 0.0 } else { rng.random::<f64>() * 1.2 * diameter.max(1e-3) };
        WassersteinBallProblem {
            nominal,
            values,
            metric,
            xi,
        }
    }
}

/// `sum_i p_i min_j (V_j + lambda d_ij)`, the dual objective before `- lambda xi`.
fn dual_inner(p: &WassersteinBallProblem, lambda: f64) -> f64 {
    p.nominal
        .iter()
        .zip(&p.metric)
        .map(|(pi, row)| pi * row.iter().zip(&p.values).map(|(d, v)| v + lambda * d).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Robust minimum from the scalar dual `sup_{lambda >= 0} g(lambda)` on a
/// dense grid followed by golden-section refinement around the best point.
pub fn robust_min_dual(p: &WassersteinBallProblem) -> f64 {
    if p.xi == 0.0 {
        return zero_radius_min(p);
    }
    let g = |l: f64| dual_inner(p, l) - l * p.xi;
    let vmax = p.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let lmax = (2.0 * vmax / p.xi).max(1e-12);
    let h = lmax / (DUAL_GRID - 1) as f64;
    let (mut best_k, mut best) = (0, g(0.0));
    for k in 1..DUAL_GRID {
        let val = g(k as f64 * h);
        if val > best {
            best = val;
            best_k = k;
        }
    }
    let mut lo = best_k.saturating_sub(1) as f64 * h;
    let mut hi = ((best_k + 1).min(DUAL_GRID - 1)) as f64 * h;
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - phi * (hi - lo);
    let mut b = lo + phi * (hi - lo);
    let (mut ga, mut gb) = (g(a), g(b));
    for _ in 0..200 {
        if ga < gb {
            lo = a;
            a = b;
            ga = gb;
            b = lo + phi * (hi - lo);
            gb = g(b);
        } else {
            hi = b;
            b = a;
            gb = ga;
            a = hi - phi * (hi - lo);
            ga = g(a);
        }
        best = best.max(ga).max(gb);
        if hi - lo <= f64::EPSILON * hi.max(1.0) {
            break;
        }
    }
    best.max(g(lo)).max(g(hi))
}

/// With `xi = 0` mass may only move along zero-distance pairs.
fn zero_radius_min(p: &WassersteinBallProblem) -> f64 {
    p.nominal
        .iter()
        .zip(&p.metric)
        .map(|(pi, row)| {
            pi * row
                .iter()
                .zip(&p.values)
                .filter(|(d, _)| **d == 0.0)
                .map(|(_, v)| *v)
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

/// Robust minimum of the transport linear program by enumerating its
/// vertices. A vertex routes each source to one target, except that when the
/// budget binds one source may split between two targets.
pub fn robust_min_enumerated(p: &WassersteinBallProblem) -> Result<f64> {
    let n = p.len();
    if n > 6 {
        return Err(LabError::Domain(format!("transport enumeration supports at most 6 states, got {n}")));
    }
    let d = &p.metric;
    let v = &p.values;
    let w = &p.nominal;
    let mut best = f64::INFINITY;
    let mut assign = vec![0usize; n];
    let total = n.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        for a in assign.iter_mut() {
            *a = c % n;
            c /= n;
        }
        let cost: f64 = (0..n).map(|i| w[i] * d[i][assign[i]]).sum();
        let val: f64 = (0..n).map(|i| w[i] * v[assign[i]]).sum();
        if cost <= p.xi + METRIC_TOL {
            best = best.min(val);
        }
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            let j1 = assign[i];
            let rest_cost = cost - w[i] * d[i][j1];
            let rest_val = val - w[i] * v[j1];
            for j2 in 0..n {
                let (d1, d2) = (d[i][j1], d[i][j2]);
                if j2 == j1 || d1 == d2 {
                    continue;
                }
                let theta = (p.xi - rest_cost - w[i] * d2) / (w[i] * (d1 - d2));
                if (0.0..=1.0).contains(&theta) {
                    best = best.min(rest_val + w[i] * (theta * v[j1] + (1.0 - theta) * v[j2]));
                }
            }
        }
    }
    Ok(best)
}

/// `min E_q[V]` over `W(q, nominal) <= xi`, computed by the dual grid and
/// cross-checked against transport enumeration.
pub fn robust_min_exact(p: &WassersteinBallProblem) -> Result<f64> {
    p.validate()?;
    let dual = robust_min_dual(p);
    let primal = robust_min_enumerated(p)?;
    if (dual - primal).abs() > CROSS_CHECK_TOL {
        return Err(LabError::OracleInconsistency(format!(
            "dual {dual} and enumerated {primal} robust minima disagree"
        )));
    }
    Ok(primal)
}

/// `sum_i p_i min_{j : d_ij <= xi} V_j`.
pub fn ball_surrogate_exact(p: &WassersteinBallProblem) -> Result<f64> {
    p.validate()?;
    Ok(p.nominal
        .iter()
        .zip(&p.metric)
        .map(|(pi, row)| {
            pi * row
                .iter()
                .zip(&p.values)
                .filter(|(d, _)| **d <= p.xi)
                .map(|(_, v)| *v)
                .fold(f64::INFINITY, f64::min)
        })
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub robust_min: f64,
    pub dual_value: f64,
    pub surrogate: f64,
    pub nominal: f64,
    /// `surrogate - robust_min`.
    pub gap: f64,
    pub cross_check_error: f64,
}

/// Checks `robust_min <= surrogate <= nominal expectation`.
pub fn sandwich_check(p: &WassersteinBallProblem) -> Result<SandwichReport> {
    let robust_min = robust_min_exact(p)?;
    let dual_value = robust_min_dual(p);
    let surrogate = ball_surrogate_exact(p)?;
    let nominal = p.nominal_expectation();
    if robust_min > surrogate + SANDWICH_TOL || surrogate > nominal + SANDWICH_TOL {
        return Err(LabError::OracleFailure(format!(
            "sandwich violated: robust {robust_min}, surrogate {surrogate}, nominal {nominal}"
        )));
    }
    Ok(SandwichReport {
        robust_min,
        dual_value,
        surrogate,
        nominal,
        gap: surrogate - robust_min,
        cross_check_error: (dual_value - robust_min).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn two_state(xi: f64) -> WassersteinBallProblem {
        WassersteinBallProblem::new(vec![0.5, 0.5], vec![0.0, 1.0], vec![vec![0.0, 1.0], vec![1.0, 0.0]], xi).unwrap()
    }

    #[test]
    fn two_state_counterexample() {
        let p = two_state(0.25);
        assert!((robust_min_exact(&p).unwrap() - 0.25).abs() < 1e-9);
        assert!((ball_surrogate_exact(&p).unwrap() - 0.5).abs() < 1e-15);
        let r = sandwich_check(&p).unwrap();
        assert!((r.gap - 0.25).abs() < 1e-9);
    }

    #[test]
    fn zero_radius_gives_nominal() {
        let p = two_state(0.0);
        let r = sandwich_check(&p).unwrap();
        assert_eq!(r.robust_min, 0.5);
        assert_eq!(r.surrogate, 0.5);
        assert_eq!(r.nominal, 0.5);
    }

    #[test]
    fn large_radius_gives_global_min() {
        let p = WassersteinBallProblem::new(
            vec![0.2, 0.3, 0.5],
            vec![0.4, -0.7, 2.0],
            vec![vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 1.0], vec![2.0, 1.0, 0.0]],
            2.0,
        )
        .unwrap();
        assert!((robust_min_exact(&p).unwrap() + 0.7).abs() < 1e-9);
        assert_eq!(ball_surrogate_exact(&p).unwrap(), -0.7);
    }

    #[test]
    fn invalid_metric_rejected() {
        let bad = WassersteinBallProblem::new(vec![0.5, 0.5], vec![0.0, 1.0], vec![vec![0.0, 1.0], vec![2.0, 0.0]], 0.1);
        assert!(bad.is_err());
        let tri = WassersteinBallProblem::new(
            vec![0.3, 0.3, 0.4],
            vec![0.0; 3],
            vec![vec![0.0, 1.0, 5.0], vec![1.0, 0.0, 1.0], vec![5.0, 1.0, 0.0]],
            0.1,
        );
        assert!(tri.is_err());
        assert!(WassersteinBallProblem::new(vec![0.6, 0.6], vec![0.0; 2], vec![vec![0.0, 1.0], vec![1.0, 0.0]], 0.1).is_err());
    }

    #[test]
    fn random_problems_sandwich() {
        let mut rng = seeded(11);
        for _ in 0..100 {
            let p = WassersteinBallProblem::random(&mut rng, 5);
            let r = sandwich_check(&p).unwrap();
            assert!(r.cross_check_error <= CROSS_CHECK_TOL);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn monotone_in_radius(seed in 0u64..10_000, a in 0.0f64..1.5, b in 0.0f64..1.5) {
            let mut p = WassersteinBallProblem::random(&mut seeded(seed), 4);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            p.xi = lo;
            let (r_lo, s_lo) = (robust_min_exact(&p).unwrap(), ball_surrogate_exact(&p).unwrap());
            p.xi = hi;
            let (r_hi, s_hi) = (robust_min_exact(&p).unwrap(), ball_surrogate_exact(&p).unwrap());
            prop_assert!(r_hi <= r_lo + 1e-9);
            prop_assert!(s_hi <= s_lo);
        }
    }
}
