//! Brute-force verifiers on enumerable instances.

mod qbound;
mod suite;
mod wasserstein;

pub use qbound::{perturbed_chain, q_bound_check, BoundViolation, QBoundReport, TabularModel};
pub use suite::{
    ball_form_discrepancy, exact_chain, q_bound_suite, sandwich_suite, verify_all, BallFormDiscrepancy, QBoundSuiteReport,
    SandwichSuiteReport, VerifyReport,
};
pub use wasserstein::{
    ball_surrogate_exact, robust_min_dual, robust_min_enumerated, robust_min_exact, sandwich_check, SandwichReport,
    WassersteinBallProblem, CROSS_CHECK_TOL, DUAL_GRID, SANDWICH_TOL,
};
