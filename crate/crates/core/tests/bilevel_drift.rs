use romi_core::bilevel::{inner_step_capped, outer_implicit_grad, WeightingNet};
use romi_core::dynamics::{pretrain_mle, GaussianDynamicsEnsemble, PretrainConfig, TransitionBatch};
use romi_core::mdp::{generate_dataset, BehaviorPolicy, ContinuousEnv, Environment};
use romi_core::nn::Optimizer;
use romi_core::rng::{seeded, stream};
use romi_core::rvl::{draw_rvl, FnValue, UncertaintySetSpec};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn weights_drift_on_penalised_region_and_stay_in_range() {
    let env = ContinuousEnv::linear_gaussian();
    let ds = generate_dataset(&Environment::Continuous(env), &BehaviorPolicy::random(), 2000, 21).unwrap();
    let mut ens = GaussianDynamicsEnsemble::new(2, 1, vec![16, 16], 1, 21).unwrap();
    let pre = PretrainConfig {
        epochs: 5,
        lr: 1e-3,
        batch_size: 128,
    };
    pretrain_mle(&mut ens, &ds, &pre, 21).unwrap();
    let mut member = ens.members[0].clone();

    // Value drops by 5 once the first coordinate passes 0.5.
    let value = FnValue {
        dim: 2,
        value: |s: &[f64]| -5.0 * sigmoid(10.0 * (s[0] - 0.5)),
        grad: |s: &[f64]| {
            let z = sigmoid(10.0 * (s[0] - 0.5));
            vec![-50.0 * z * (1.0 - z), 0.0]
        },
    };
    let batch = TransitionBatch::from_transitions(&ds.transitions[..256]).unwrap();
    let region: Vec<bool> = (0..batch.len()).map(|i| batch.next_states[[i, 0]] > 0.5).collect();
    let in_region = region.iter().filter(|r| **r).count();
    assert!((20..=236).contains(&in_region), "region split {in_region}");

    let mut weighting = WeightingNet::init(2, 1, vec![16], (0.5, 2.0), &mut seeded(3)).unwrap();
    let mut opt = Optimizer::adam(1e-2, weighting.num_params());
    let spec = UncertaintySetSpec::default();
    let mut rng = stream(21, "drift");
    let region_mean = |w: &ndarray::Array1<f64>, inside: bool| {
        let xs: Vec<f64> = w.iter().zip(&region).filter(|(_, r)| **r == inside).map(|(w, _)| *w).collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    let w0 = weighting.weights(&batch).unwrap();
    let mut h_region = 0.0;
    let mut h_other = 0.0;
    for step in 0..200u64 {
        let (after, record) = inner_step_capped(&member, &weighting, &batch, 3e-4, Some(1e-3), step).unwrap();
        assert!(record.weights.iter().all(|w| (0.5..=2.0).contains(w)), "weight left [0.5, 2] at step {step}");
        let draws = draw_rvl(&value, &batch, &spec, 2, &mut rng).unwrap();
        let outer = outer_implicit_grad(&record, &after, &value, &batch, &draws, &weighting, step).unwrap();
        for (h, r) in outer.h.iter().zip(&region) {
            if *r {
                h_region += h / in_region as f64;
            } else {
                h_other += h / (batch.len() - in_region) as f64;
            }
        }
        opt.step(weighting.params_mut(), &outer.grad).unwrap();
        member = after;
    }
    let w1 = weighting.weights(&batch).unwrap();
    assert!(w1.iter().all(|w| (0.5..=2.0).contains(w)));
    let drift_region = region_mean(&w1, true) - region_mean(&w0, true);
    let drift_other = region_mean(&w1, false) - region_mean(&w0, false);
    assert!(drift_region.abs() > 0.02, "region weight moved by only {drift_region}");
    // Descent on sum_i h_i w_i lowers weights where h is larger.
    let relative = drift_region - drift_other;
    assert!(
        relative * (h_region - h_other) < 0.0,
        "relative drift {relative} has the same sign as the h gap {}",
        h_region - h_other
    );
}
