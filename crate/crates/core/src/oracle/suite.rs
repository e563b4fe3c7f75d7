//! Randomised oracle suites behind `verify` and the acceptance tests.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::qbound::{perturbed_chain, q_bound_check, TabularModel};
use super::wasserstein::{sandwich_check, WassersteinBallProblem, CROSS_CHECK_TOL};
use crate::error::{LabError, Result};
use crate::mdp::{Backup, TabularMDP};
use crate::rng::stream;
use crate::rvl::{Metric, UncertaintySetSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichSuiteReport {
    pub instances: usize,
    pub violations: usize,
    pub inconsistencies: usize,
    pub max_cross_check_error: f64,
    pub max_gap: f64,
    /// Instances where the ball surrogate is strictly above the exact minimum.
    pub strict_gaps: usize,
    pub seconds: f64,
}

impl SandwichSuiteReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.inconsistencies == 0 && self.max_cross_check_error <= CROSS_CHECK_TOL
    }
}

pub fn sandwich_suite(instances: usize, max_states: usize, seed: u64) -> SandwichSuiteReport {
    let start = Instant::now();
    let mut rng = stream(seed, "sandwich-suite");
    let mut rep = SandwichSuiteReport {
        instances,
        violations: 0,
        inconsistencies: 0,
        max_cross_check_error: 0.0,
        max_gap: 0.0,
        strict_gaps: 0,
        seconds: 0.0,
    };
    for _ in 0..instances {
        let p = WassersteinBallProblem::random(&mut rng, max_states);
        match sandwich_check(&p) {
            Ok(r) => {
                rep.max_cross_check_error = rep.max_cross_check_error.max(r.cross_check_error);
                rep.max_gap = rep.max_gap.max(r.gap);
                if r.gap > 1e-9 {
                    rep.strict_gaps += 1;
                }
            }
            Err(LabError::OracleInconsistency(_)) => rep.inconsistencies += 1,
            Err(_) => rep.violations += 1,
        }
    }
    rep.seconds = start.elapsed().as_secs_f64();
    rep
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QBoundSuiteReport {
    pub instances: usize,
    pub failed_instances: usize,
    pub total_violations: usize,
    pub pairs_checked: usize,
    /// Largest `|Q_hat - Q_true|` on the perfect-model, zero-radius control.
    pub perfect_model_max_error: f64,
    pub max_epsilon1: f64,
    pub max_epsilon2: f64,
    pub seconds: f64,
}

impl QBoundSuiteReport {
    pub fn passed(&self) -> bool {
        self.failed_instances == 0 && self.perfect_model_max_error <= 1e-9
    }
}

/// Each instance draws a perturbed chain, a count-based model and a radius,
/// then checks both greedy and uniform-policy backups, plus the
/// perfect-model control at zero radius.
pub fn q_bound_suite(instances: usize, num_states: usize, seed: u64) -> Result<QBoundSuiteReport> {
    use rand::Rng;
    let start = Instant::now();
    let mut rng = stream(seed, "q-bound-suite");
    let mut rep = QBoundSuiteReport {
        instances,
        failed_instances: 0,
        total_violations: 0,
        pairs_checked: 0,
        perfect_model_max_error: 0.0,
        max_epsilon1: 0.0,
        max_epsilon2: 0.0,
        seconds: 0.0,
    };
    let spec = |xi: f64| UncertaintySetSpec {
        xi,
        num_samples: 1,
        metric: Metric::EuclideanBall,
        include_center: true,
    };
    for _ in 0..instances {
        let samples = rng.random_range(50..400);
        let (mdp, model) = perturbed_chain(&mut rng, num_states, samples)?;
        let xi = [0.0, 0.5, 1.0, 2.0][rng.random_range(0..4)];
        let uniform = vec![vec![1.0 / mdp.num_actions as f64; mdp.num_actions]; num_states];
        let mut bad = false;
        for backup in [Backup::Greedy, Backup::Policy(&uniform)] {
            let r = q_bound_check(&mdp, &model, &spec(xi), &backup)?;
            rep.pairs_checked += num_states * mdp.num_actions;
            rep.total_violations += r.violations.len();
            rep.max_epsilon1 = rep.max_epsilon1.max(r.epsilon1);
            rep.max_epsilon2 = rep.max_epsilon2.max(r.epsilon2);
            bad |= !r.passed();
        }
        let control = q_bound_check(&mdp, &TabularModel::from_mdp(&mdp), &spec(0.0), &Backup::Greedy)?;
        rep.perfect_model_max_error = rep.perfect_model_max_error.max(control.max_abs_error());
        bad |= !control.passed();
        if bad {
            rep.failed_instances += 1;
        }
    }
    rep.seconds = start.elapsed().as_secs_f64();
    Ok(rep)
}

/// The two-state instance on which the ball form and the hard-constraint
/// minimum differ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallFormDiscrepancy {
    pub robust_min: f64,
    pub surrogate: f64,
    pub note: String,
}

pub fn ball_form_discrepancy() -> Result<BallFormDiscrepancy> {
    let p = WassersteinBallProblem::new(vec![0.5, 0.5], vec![0.0, 1.0], vec![vec![0.0, 1.0], vec![1.0, 0.0]], 0.25)?;
    let r = sandwich_check(&p)?;
    Ok(BallFormDiscrepancy {
        robust_min: r.robust_min,
        surrogate: r.surrogate,
        note: "the per-point ball minimum is an upper bound on the Wasserstein-ball minimum, not an equality".into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub sandwich: SandwichSuiteReport,
    pub q_bound: QBoundSuiteReport,
    pub ball_form: BallFormDiscrepancy,
    pub passed: bool,
}

pub fn verify_all(sandwich_instances: usize, q_instances: usize, seed: u64) -> Result<VerifyReport> {
    let sandwich = sandwich_suite(sandwich_instances, 5, seed);
    let q_bound = q_bound_suite(q_instances, 5, seed)?;
    let ball_form = ball_form_discrepancy()?;
    let passed = sandwich.passed() && q_bound.passed();
    Ok(VerifyReport {
        sandwich,
        q_bound,
        ball_form,
        passed,
    })
}

/// Convenience used by tests: a chain MDP and its exact model.
pub fn exact_chain(n: usize, slip: f64, discount: f64) -> Result<(TabularMDP, TabularModel)> {
    let mdp = TabularMDP::chain(n, slip, discount)?;
    let model = TabularModel::from_mdp(&mdp);
    Ok((mdp, model))
}
