//! The model-based offline training loop shared by ROMI, RAMBO and MLE-SAC.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::batch::mixed_batch;
use super::critic::{actor_loss_grad, critic_loss_grad, target_value, EntropyCoef, SacValue, TwinCritics};
use super::policy::{policy_noise, GaussianPolicy};
use crate::bilevel::{bilevel_round, BilevelState, OuterBatch, WeightingNet};
use crate::dynamics::{
    multi_step_error, nll_loss, pretrain_mle, rollout_step, start_states, step_rate, GaussianDynamicsEnsemble, ModelBuffer,
    PretrainConfig, RolloutStats, TransitionBatch,
};
use crate::error::{LabError, Result};
use crate::mdp::{evaluate_continuous, normalized_score, BehaviorPolicy, ContinuousEnv, OfflineDataset};
use crate::nn::{GradVector, Optimizer, OptimizerKind};
use crate::rambo::{adversarial_loss, AdversarialConfig};
use crate::rng::{stream, LabRng};
use crate::rvl::{compute_epsilons, rvl_loss, EpsilonConfig, UncertaintySetSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Romi,
    Rambo,
    MleSac,
}

impl std::str::FromStr for Algo {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "romi" => Ok(Algo::Romi),
            "rambo" => Ok(Algo::Rambo),
            "mle-sac" => Ok(Algo::MleSac),
            other => Err(LabError::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// How the dynamics ensemble is updated during policy training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelUpdate {
    /// Weighted inner step plus implicit outer step on the weighting net.
    Bilevel,
    /// Plain gradient step on the NLL.
    Mle,
    /// Plain gradient step on the adversarial objective.
    Adversarial,
    /// Plain gradient step on the RVL loss alone.
    RvlOnly,
}

/// When SAC updates happen relative to model rollouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SacSchedule {
    PerRolloutStep,
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algo: Algo,
    /// Overrides the algorithm's default model update.
    pub model_update: Option<ModelUpdate>,
    pub epochs: usize,

    pub ensemble_size: usize,
    pub model_hidden: Vec<usize>,
    pub pretrain: PretrainConfig,
    /// Inner (model) learning rate beta_1, used with plain gradient descent.
    pub model_lr: f64,
    /// Caps the length of every plain model step; `None` leaves `model_lr` as is.
    pub model_max_step: Option<f64>,
    pub model_steps_per_epoch: usize,
    pub model_batch: usize,

    pub weight_hidden: Vec<usize>,
    pub weight_range: (f64, f64),
    /// Outer learning rate beta_2.
    pub weight_lr: f64,
    pub outer_optimizer: OptimizerKind,
    pub outer_batch: OuterBatch,

    pub rvl: UncertaintySetSpec,
    pub k_mc: usize,
    /// Include the entropy bonus in the value used by the model losses.
    pub value_entropy: bool,

    pub rollouts: bool,
    pub rollout_horizon: usize,
    pub rollout_batch: usize,
    pub buffer_capacity: usize,

    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub alpha_lr: f64,
    pub init_log_alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub real_ratio: f64,
    pub sac_schedule: SacSchedule,
    /// SAC updates per rollout step or per epoch, depending on the schedule.
    pub sac_updates: usize,
    pub bc_epochs: usize,

    pub adversarial: AdversarialConfig,

    pub eval_every: usize,
    pub eval_episodes: usize,
    pub q_rows: usize,
    /// Epsilon diagnostics every this many epochs; 0 disables them.
    pub diag_every: usize,
    pub epsilon: EpsilonConfig,
    pub pred_err_steps: usize,
    pub pred_err_starts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::toy()
    }
}

impl TrainConfig {
    /// Full-size defaults.
    pub fn full() -> Self {
        TrainConfig {
            algo: Algo::Romi,
            model_update: None,
            epochs: 1000,
            ensemble_size: 7,
            model_hidden: vec![200; 4],
            pretrain: PretrainConfig::default(),
            model_lr: 3e-4,
            model_max_step: None,
            model_steps_per_epoch: 1,
            model_batch: 256,
            weight_hidden: vec![256; 3],
            weight_range: (0.5, 2.0),
            weight_lr: 1e-4,
            outer_optimizer: OptimizerKind::PlainGradientDescent,
            outer_batch: OuterBatch::Same,
            rvl: UncertaintySetSpec {
                xi: 0.1,
                num_samples: 10,
                ..UncertaintySetSpec::default()
            },
            k_mc: 1,
            value_entropy: true,
            rollouts: true,
            rollout_horizon: 5,
            rollout_batch: 50_000,
            buffer_capacity: 2_000_000,
            policy_hidden: vec![256, 256],
            critic_hidden: vec![256, 256],
            critic_lr: 3e-4,
            actor_lr: 1e-4,
            alpha_lr: 1e-4,
            init_log_alpha: 0.0,
            gamma: 0.99,
            tau: 5e-3,
            batch_size: 256,
            real_ratio: 0.5,
            sac_schedule: SacSchedule::PerRolloutStep,
            sac_updates: 1,
            bc_epochs: 0,
            adversarial: AdversarialConfig::default(),
            eval_every: 10,
            eval_episodes: 10,
            q_rows: 1024,
            diag_every: 0,
            epsilon: EpsilonConfig::default(),
            pred_err_steps: 5,
            pred_err_starts: 256,
        }
    }

    /// Desk-scale defaults.
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 40,
            ensemble_size: 7,
            model_hidden: vec![32; 4],
            pretrain: PretrainConfig {
                epochs: 50,
                lr: 1e-3,
                batch_size: 256,
            },
            model_lr: 3e-4,
            model_max_step: Some(1e-3),
            model_steps_per_epoch: 5,
            model_batch: 256,
            weight_hidden: vec![64; 3],
            rollout_batch: 200,
            buffer_capacity: 20_000,
            policy_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            critic_lr: 3e-4,
            actor_lr: 1e-4,
            alpha_lr: 1e-4,
            sac_updates: 20,
            eval_every: 10,
            eval_episodes: 10,
            q_rows: 1024,
            ..TrainConfig::full()
        }
    }

    pub fn model_update_mode(&self) -> ModelUpdate {
        self.model_update.unwrap_or(match self.algo {
            Algo::Romi => ModelUpdate::Bilevel,
            Algo::Rambo => ModelUpdate::Adversarial,
            Algo::MleSac => ModelUpdate::Mle,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(LabError::Config(what.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.ensemble_size == 0 || self.model_batch == 0 || self.batch_size == 0 {
            return bad("ensemble size and batch sizes must be >= 1");
        }
        if !(self.model_lr >= 0.0) || !(self.weight_lr > 0.0) || !(self.critic_lr >= 0.0) || !(self.actor_lr >= 0.0) || !(self.alpha_lr >= 0.0) {
            return bad("learning rates must be non-negative (weight_lr positive)");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.real_ratio) {
            return bad("tau and real_ratio must lie in [0, 1]");
        }
        let (a, b) = self.weight_range;
        if !(a > 0.0 && a <= b) {
            return bad("weight range must satisfy 0 < a <= b");
        }
        if self.rollouts && (self.rollout_horizon == 0 || self.rollout_batch == 0) {
            return bad("rollout horizon and batch must be >= 1 when rollouts are enabled");
        }
        if !self.rollouts && self.real_ratio < 1.0 {
            return bad("rollouts are disabled, so real_ratio must be 1");
        }
        if self.buffer_capacity == 0 || self.k_mc == 0 || self.pred_err_steps == 0 {
            return bad("buffer capacity, k_mc and pred_err_steps must be >= 1");
        }
        self.rvl.validate().map_err(|e| LabError::Config(e.to_string()))?;
        self.adversarial.validate().map_err(|e| LabError::Config(e.to_string()))?;
        self.pretrain_valid()
    }

    fn pretrain_valid(&self) -> Result<()> {
        if self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 {
            return Err(LabError::Config("pretraining epochs and batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch scalar metrics, keyed by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub policy: GaussianPolicy,
    pub critics: TwinCritics,
    pub ensemble: GaussianDynamicsEnsemble,
    pub weighting: Option<WeightingNet>,
    pub metrics: Vec<EpochMetrics>,
    pub diverged: bool,
    pub divergence: Option<String>,
}

impl TrainOutput {
    pub fn final_metric(&self, key: &str) -> Option<f64> {
        self.metrics.iter().rev().find_map(|m| m.values.get(key).copied())
    }
}

/// Pretrain a fresh ensemble on `dataset` with the config's settings.
pub fn pretrain_ensemble(config: &TrainConfig, dataset: &OfflineDataset, seed: u64) -> Result<GaussianDynamicsEnsemble> {
    let mut e = GaussianDynamicsEnsemble::new(
        dataset.state_dim(),
        dataset.action_dim(),
        config.model_hidden.clone(),
        config.ensemble_size,
        seed,
    )?;
    pretrain_mle(&mut e, dataset, &config.pretrain, seed)?;
    Ok(e)
}

/// Full pipeline: MLE pretraining, then [`train_with_pretrained`].
pub fn train_romi(config: &TrainConfig, dataset: &OfflineDataset, seed: u64) -> Result<TrainOutput> {
    config.validate()?;
    let e = pretrain_ensemble(config, dataset, seed)?;
    train_with_pretrained(config, dataset, seed, &e)
}

struct Learner {
    policy: GaussianPolicy,
    critics: TwinCritics,
    alpha: EntropyCoef,
    actor_opt: Optimizer,
    critic_opts: [Optimizer; 2],
}

#[derive(Default)]
struct Acc {
    sums: BTreeMap<&'static str, (f64, usize)>,
    maxes: BTreeMap<&'static str, f64>,
    mins: BTreeMap<&'static str, f64>,
}

impl Acc {
    fn add(&mut self, k: &'static str, v: f64) {
        let e = self.sums.entry(k).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }

    fn max(&mut self, k: &'static str, v: f64) {
        let e = self.maxes.entry(k).or_insert(f64::NEG_INFINITY);
        *e = e.max(v);
    }

    fn min(&mut self, k: &'static str, v: f64) {
        let e = self.mins.entry(k).or_insert(f64::INFINITY);
        *e = e.min(v);
    }

    fn drain_into(&mut self, out: &mut BTreeMap<String, f64>) {
        for (k, (s, n)) in std::mem::take(&mut self.sums) {
            out.insert(k.to_string(), s / n as f64);
        }
        for (k, v) in std::mem::take(&mut self.maxes) {
            out.insert(k.to_string(), v);
        }
        for (k, v) in std::mem::take(&mut self.mins) {
            out.insert(k.to_string(), v);
        }
    }
}

fn is_divergence(e: &LabError) -> bool {
    matches!(e, LabError::Divergence(_) | LabError::NonFinite(_))
}

fn sac_update(
    learner: &mut Learner,
    config: &TrainConfig,
    dataset: &OfflineDataset,
    buffer: &ModelBuffer,
    rng: &mut LabRng,
    acc: &mut Acc,
) -> Result<()> {
    let rows = mixed_batch(dataset, buffer, config.batch_size, config.real_ratio, rng)?;
    let batch = TransitionBatch::from_transitions(&rows)?;
    let n = rows.len();
    let alpha = learner.alpha.alpha();
    let z_next = policy_noise(&learner.policy, n, rng);
    let v_next = target_value(&learner.critics, &learner.policy, alpha, batch.next_states.view(), z_next.view())?;
    let y = ndarray::Array1::from_shape_fn(n, |i| {
        let t = &rows[i];
        t.reward + config.gamma * if t.terminal { 0.0 } else { v_next[i] }
    });
    let (critic_loss, grads) = critic_loss_grad(&learner.critics, batch.states.view(), batch.actions.view(), &y)?;
    for j in 0..2 {
        learner.critic_opts[j].step(learner.critics.online[j].params.as_mut_slice(), &grads[j])?;
    }
    let z = policy_noise(&learner.policy, n, rng);
    let (actor_loss, g_pi, mean_logp) = actor_loss_grad(&learner.policy, &learner.critics, alpha, batch.states.view(), z.view())?;
    learner.actor_opt.step(learner.policy.params_mut(), &g_pi)?;
    learner.alpha.update(mean_logp)?;
    learner.critics.soft_update();
    acc.add("critic_loss", critic_loss);
    acc.add("actor_loss", actor_loss);
    acc.add("entropy", -mean_logp);
    Ok(())
}

fn behavior_cloning(learner: &mut Learner, config: &TrainConfig, dataset: &OfflineDataset, rng: &mut LabRng) -> Result<()> {
    let mut opt = Optimizer::adam(config.actor_lr.max(1e-4), learner.policy.params().len());
    let steps = config.bc_epochs * dataset.len().div_ceil(config.batch_size);
    for _ in 0..steps {
        let rows = dataset.batch(&dataset.sample_indices(config.batch_size, rng));
        let batch = TransitionBatch::from_transitions(&rows)?;
        let zero = Array2::zeros((rows.len(), learner.policy.action_dim));
        let smp = learner.policy.sample(batch.states.view(), zero.view())?;
        let ga = (&smp.actions - &batch.actions) * (2.0 / rows.len() as f64);
        let (g, _) = learner.policy.backward(&smp, ga.view(), &ndarray::Array1::zeros(rows.len()))?;
        opt.step(learner.policy.params_mut(), &g)?;
    }
    Ok(())
}

/// Policy training on top of an already pretrained ensemble (copied, not
/// modified). Divergence stops the run and is reported in the output.
pub fn train_with_pretrained(
    config: &TrainConfig,
    dataset: &OfflineDataset,
    seed: u64,
    pretrained: &GaussianDynamicsEnsemble,
) -> Result<TrainOutput> {
    train_with_callback(config, dataset, seed, pretrained, &mut |_| Ok(()))
}

/// [`train_with_pretrained`] that hands each epoch's metrics to `on_epoch`
/// as soon as they are complete.
pub fn train_with_callback(
    config: &TrainConfig,
    dataset: &OfflineDataset,
    seed: u64,
    pretrained: &GaussianDynamicsEnsemble,
    on_epoch: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutput> {
    config.validate()?;
    let env = dataset.meta.env.as_continuous()?.clone();
    let k = dataset.state_dim();
    let m = dataset.action_dim();
    if pretrained.state_dim() != k || pretrained.action_dim() != m {
        return Err(LabError::Shape("pretrained ensemble does not match the dataset".into()));
    }
    let mut init_rng = stream(seed, "init");
    let policy = GaussianPolicy::init(k, m, config.policy_hidden.clone(), env.action_limit(), &mut init_rng)?;
    let critics = TwinCritics::init(k, m, config.critic_hidden.clone(), config.tau, &mut init_rng)?;
    let mut learner = Learner {
        actor_opt: Optimizer::adam(config.actor_lr, policy.params().len()),
        critic_opts: [
            Optimizer::adam(config.critic_lr, critics.online[0].num_params()),
            Optimizer::adam(config.critic_lr, critics.online[1].num_params()),
        ],
        alpha: EntropyCoef::new(config.init_log_alpha, -(m as f64), config.alpha_lr),
        policy,
        critics,
    };
    let mode = config.model_update_mode();
    let mut weighting = match mode {
        ModelUpdate::Bilevel => Some(WeightingNet::init(
            k,
            m,
            config.weight_hidden.clone(),
            config.weight_range,
            &mut stream(seed, "weighting-init"),
        )?),
        _ => None,
    };
    let mut bilevel_state = match &weighting {
        Some(w) => {
            let mut st = BilevelState::new(
                config.model_lr.max(f64::MIN_POSITIVE),
                config.weight_lr,
                config.rvl,
                config.k_mc,
                config.outer_optimizer,
                w.num_params(),
            )?;
            st.beta1 = config.model_lr;
            st.outer_batch = config.outer_batch;
            st.max_step = config.model_max_step;
            Some(st)
        }
        None => None,
    };

    let mut ensemble = pretrained.clone();
    let snapshot = pretrained.clone();
    let mut buffer = ModelBuffer::new(config.buffer_capacity)?;
    let mut rng_roll = stream(seed, "rollout");
    let mut rng_sac = stream(seed, "sac");
    let mut rng_model = stream(seed, "model-update");
    let mut rng_adv = stream(seed, "adv");
    let mut rng_diag = stream(seed, "diag");
    let q_idx = dataset.sample_indices(config.q_rows.max(1), &mut stream(seed, "q-rows"));
    let q_batch = TransitionBatch::from_transitions(&dataset.batch(&q_idx))?;

    if config.bc_epochs > 0 {
        behavior_cloning(&mut learner, config, dataset, &mut stream(seed, "bc"))?;
    }

    let references = if config.eval_every > 0 {
        Some(reference_returns(&env, config.eval_episodes, seed)?)
    } else {
        None
    };
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut divergence = None;
    for epoch in 0..config.epochs {
        let mut acc = Acc::default();
        let step = run_epoch(
            epoch,
            config,
            mode,
            dataset,
            &env,
            &mut learner,
            &mut ensemble,
            &snapshot,
            &mut weighting,
            &mut bilevel_state,
            &mut buffer,
            [&mut rng_roll, &mut rng_sac, &mut rng_model, &mut rng_adv],
            &mut acc,
        );
        let mut values = BTreeMap::new();
        if let Err(e) = step {
            if is_divergence(&e) {
                divergence = Some(e.to_string());
                acc.drain_into(&mut values);
                values.insert("diverged".into(), 1.0);
                metrics.push(EpochMetrics { epoch, values });
                on_epoch(metrics.last().expect("just pushed"))?;
                break;
            }
            return Err(e);
        }
        acc.drain_into(&mut values);
        let q = learner.critics.min_q(q_batch.states.view(), q_batch.actions.view())?;
        let q_mean = q.mean().unwrap_or(f64::NAN);
        values.insert("q_mean".into(), q_mean);
        values.insert("alpha".into(), learner.alpha.alpha());
        values.insert("buffer_size".into(), buffer.len() as f64);
        let nll = ensemble
            .members
            .iter()
            .map(|mm| nll_loss(mm, &q_batch).map(|(l, _)| l))
            .collect::<Result<Vec<_>>>();
        match nll {
            Ok(v) => {
                values.insert("model_nll".into(), v.iter().sum::<f64>() / v.len() as f64);
            }
            Err(e) if is_divergence(&e) => {
                values.insert("model_nll".into(), f64::INFINITY);
            }
            Err(e) => return Err(e),
        }
        if let Ok(err) = multi_step_error(&ensemble, dataset, config.pred_err_steps, config.pred_err_starts) {
            values.insert(format!("pred_err_{}", config.pred_err_steps), err);
        }
        let last = epoch + 1 == config.epochs;
        if config.eval_every > 0 && ((epoch + 1) % config.eval_every == 0 || last) {
            let ret = evaluate_policy(&learner.policy, &env, config.eval_episodes, seed)?;
            values.insert("return".into(), ret);
            if let Some((lo, hi)) = references {
                if let Ok(score) = normalized_score(ret, lo, hi) {
                    values.insert("normalized_score".into(), score);
                }
            }
        }
        if config.diag_every > 0 && (epoch + 1) % config.diag_every == 0 && !buffer.is_empty() {
            let value = SacValue {
                critics: &learner.critics,
                policy: &learner.policy,
                alpha: learner.alpha.alpha(),
                include_entropy: config.value_entropy,
            };
            let d = compute_epsilons(&ensemble, &snapshot, &value, &buffer, dataset, &env, &config.rvl, &config.epsilon, &mut rng_diag)?;
            values.insert("eps1".into(), d.epsilon1);
            values.insert("eps2".into(), d.epsilon2);
            values.insert("eps1_p99".into(), d.epsilon1_p99);
            values.insert("eps2_p99".into(), d.epsilon2_p99);
            values.insert("lipschitz_lb".into(), d.lipschitz_lb);
            values.insert("corollary_bound".into(), d.corollary_bound);
        }
        let q_ok = q_mean.is_finite() && q_mean.abs() < 1e8;
        if !q_ok {
            values.insert("diverged".into(), 1.0);
            divergence = Some(format!("Q estimate {q_mean} at epoch {epoch}"));
        }
        metrics.push(EpochMetrics { epoch, values });
        on_epoch(metrics.last().expect("just pushed"))?;
        if !q_ok {
            break;
        }
    }
    Ok(TrainOutput {
        policy: learner.policy,
        critics: learner.critics,
        ensemble,
        weighting,
        metrics,
        diverged: divergence.is_some(),
        divergence,
    })
}

/// Returns of the uniform-random and the noise-free expert controllers,
/// the anchors of the normalized score.
pub fn reference_returns(env: &ContinuousEnv, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let random = BehaviorPolicy::random();
    let j_random = evaluate_continuous(env, |s, r| Ok(random.act_continuous(env, s, r)), episodes.max(1), env.horizon(), seed)?.mean;
    let j_expert = evaluate_continuous(env, |s, _| Ok(env.expert_action(s)), episodes.max(1), env.horizon(), seed)?.mean;
    Ok((j_random, j_expert))
}

/// Undiscounted return of the deterministic policy `limit * tanh(mu(s))`.
pub fn evaluate_policy(policy: &GaussianPolicy, env: &ContinuousEnv, episodes: usize, seed: u64) -> Result<f64> {
    let est = evaluate_continuous(
        env,
        |s, _| {
            let x = Array2::from_shape_vec((1, s.len()), s.to_vec()).map_err(|e| LabError::Shape(e.to_string()))?;
            Ok(policy.mean_action(x.view())?.row(0).to_vec())
        },
        episodes.max(1),
        env.horizon(),
        seed,
    )?;
    Ok(est.mean)
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    _epoch: usize,
    config: &TrainConfig,
    mode: ModelUpdate,
    dataset: &OfflineDataset,
    env: &ContinuousEnv,
    learner: &mut Learner,
    ensemble: &mut GaussianDynamicsEnsemble,
    _snapshot: &GaussianDynamicsEnsemble,
    weighting: &mut Option<WeightingNet>,
    bilevel_state: &mut Option<BilevelState>,
    buffer: &mut ModelBuffer,
    rngs: [&mut LabRng; 4],
    acc: &mut Acc,
) -> Result<()> {
    let [rng_roll, rng_sac, rng_model, rng_adv] = rngs;
    let per_step = config.sac_schedule == SacSchedule::PerRolloutStep;
    if config.rollouts {
        let mut states = start_states(dataset, config.rollout_batch, rng_roll);
        let mut stats = RolloutStats::default();
        for _ in 0..config.rollout_horizon {
            if states.nrows() == 0 {
                break;
            }
            let policy = &learner.policy;
            let mut act = |s: &Array2<f64>, r: &mut LabRng| -> Result<Array2<f64>> {
                let z = policy_noise(policy, s.nrows(), r);
                Ok(policy.sample(s.view(), z.view())?.actions)
            };
            states = rollout_step(ensemble, env, &mut act, &states, buffer, rng_roll, &mut stats)?;
            if per_step {
                for _ in 0..config.sac_updates {
                    sac_update(learner, config, dataset, buffer, rng_sac, acc)?;
                }
            }
        }
    } else if per_step {
        for _ in 0..config.rollout_horizon.max(1) * config.sac_updates {
            sac_update(learner, config, dataset, buffer, rng_sac, acc)?;
        }
    }
    if !per_step {
        for _ in 0..config.sac_updates {
            sac_update(learner, config, dataset, buffer, rng_sac, acc)?;
        }
    }

    let value = SacValue {
        critics: &learner.critics,
        policy: &learner.policy,
        alpha: learner.alpha.alpha(),
        include_entropy: config.value_entropy,
    };
    for _ in 0..config.model_steps_per_epoch {
        for member in ensemble.members.iter_mut() {
            let rows = dataset.batch(&dataset.sample_indices(config.model_batch, rng_model));
            let batch = TransitionBatch::from_transitions(&rows)?;
            match mode {
                ModelUpdate::Mle => {
                    let (loss, g) = nll_loss(member, &batch)?;
                    apply_plain(member.params_mut(), &g, config.model_lr, config.model_max_step);
                    acc.add("model_loss", loss);
                    acc.add("grad_norm_inner", g.norm());
                }
                ModelUpdate::Adversarial => {
                    let starts = start_states(dataset, config.adversarial.adv_rollout_batch, rng_adv);
                    let out = adversarial_loss(member, &learner.policy, &value, &batch, Some(starts.view()), &config.adversarial, rng_adv)?;
                    apply_plain(member.params_mut(), &out.grad, config.model_lr, config.model_max_step);
                    acc.add("model_loss", out.loss);
                    acc.add("grad_norm_inner", out.grad.norm());
                    acc.add("adv_grad_norm", out.adv_grad_norm);
                    acc.max("adv_grad_norm_max", out.adv_grad_norm);
                    acc.add("adv_value", out.mean_value);
                }
                ModelUpdate::RvlOnly => {
                    let (loss, g) = rvl_loss(member, &value, &batch, &config.rvl, config.k_mc, rng_model)?;
                    apply_plain(member.params_mut(), &g, config.model_lr, config.model_max_step);
                    acc.add("rvl_loss", loss);
                    acc.add("grad_norm_inner", g.norm());
                }
                ModelUpdate::Bilevel => {
                    let w = weighting.as_mut().expect("weighting net exists in bilevel mode");
                    let st = bilevel_state.as_mut().expect("bilevel state exists in bilevel mode");
                    let fresh = if st.outer_batch == OuterBatch::Fresh {
                        Some(TransitionBatch::from_transitions(
                            &dataset.batch(&dataset.sample_indices(config.model_batch, rng_model)),
                        )?)
                    } else {
                        None
                    };
                    let rec = bilevel_round(member, w, &value, &batch, fresh.as_ref(), st, rng_model)?;
                    acc.add("model_loss", rec.inner_loss);
                    acc.add("wsl_loss", rec.inner_loss);
                    acc.add("grad_norm_inner", rec.inner_grad_norm);
                    acc.add("rvl_loss", rec.outer_loss);
                    acc.add("grad_norm_outer", rec.outer_grad_norm);
                    acc.add("weight_mean", rec.weight_mean);
                    acc.min("weight_min", rec.weight_min);
                    acc.max("weight_max", rec.weight_max);
                    acc.min("min_outer_grad_sq", rec.min_outer_grad_sq);
                    acc.min("min_inner_grad_sq", rec.min_inner_grad_sq);
                }
            }
        }
    }
    if ensemble.members.iter().any(|mm| mm.params().iter().any(|p| !p.is_finite())) {
        return Err(LabError::Divergence("model parameters became non-finite".into()));
    }
    Ok(())
}

fn apply_plain(params: &mut [f64], grad: &GradVector, lr: f64, max_step: Option<f64>) {
    let lr = step_rate(lr, grad.norm(), max_step);
    for (p, g) in params.iter_mut().zip(grad.as_slice()) {
        *p -= lr * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{generate_dataset, Environment};

    fn tiny(algo: Algo) -> TrainConfig {
        TrainConfig {
            algo,
            epochs: 2,
            ensemble_size: 2,
            model_hidden: vec![8],
            pretrain: PretrainConfig {
                epochs: 2,
                lr: 1e-3,
                batch_size: 64,
            },
            model_steps_per_epoch: 2,
            model_batch: 32,
            weight_hidden: vec![8],
            k_mc: 2,
            rollout_batch: 16,
            rollout_horizon: 2,
            buffer_capacity: 500,
            policy_hidden: vec![8],
            critic_hidden: vec![8],
            batch_size: 32,
            sac_updates: 2,
            bc_epochs: 0,
            eval_every: 2,
            eval_episodes: 2,
            q_rows: 32,
            pred_err_starts: 8,
            adversarial: AdversarialConfig {
                adv_rollout_batch: 16,
                ..AdversarialConfig::default()
            },
            ..TrainConfig::toy()
        }
    }

    fn data() -> OfflineDataset {
        generate_dataset(&Environment::Continuous(ContinuousEnv::point_mass()), &BehaviorPolicy::medium(), 400, 9).unwrap()
    }

    #[test]
    fn same_seed_same_metrics() {
        let ds = data();
        let cfg = tiny(Algo::Romi);
        let a = train_romi(&cfg, &ds, 1).unwrap();
        let b = train_romi(&cfg, &ds, 1).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 2);
        assert!(a.metrics[1].values.contains_key("weight_mean"));
    }

    #[test]
    fn adversarial_at_zero_lambda_matches_mle() {
        let ds = data();
        let mut rambo = tiny(Algo::Rambo);
        rambo.adversarial.lambda = 0.0;
        let mle = tiny(Algo::MleSac);
        let a = train_romi(&rambo, &ds, 4).unwrap();
        let b = train_romi(&mle, &ds, 4).unwrap();
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            for (k, v) in &y.values {
                if let Some(w) = x.values.get(k) {
                    assert_eq!(v, w, "{k} differs at epoch {}", x.epoch);
                }
            }
        }
        assert_eq!(a.final_metric("adv_grad_norm_max"), Some(0.0));
    }

    #[test]
    fn real_only_leaves_buffer_empty() {
        let ds = data();
        let cfg = TrainConfig {
            rollouts: false,
            real_ratio: 1.0,
            ..tiny(Algo::MleSac)
        };
        let out = train_romi(&cfg, &ds, 2).unwrap();
        assert_eq!(out.final_metric("buffer_size"), Some(0.0));
    }

    #[test]
    fn invalid_settings_are_config_errors() {
        let mut c = tiny(Algo::Rambo);
        c.adversarial.lambda = -0.1;
        assert!(matches!(c.validate(), Err(LabError::Config(_))));
        let c = TrainConfig {
            weight_range: (0.0, 1.0),
            ..tiny(Algo::Romi)
        };
        assert!(matches!(c.validate(), Err(LabError::Config(_))));
        assert!("sac".parse::<Algo>().is_err());
        assert_eq!("mle-sac".parse::<Algo>().unwrap(), Algo::MleSac);
    }
}
