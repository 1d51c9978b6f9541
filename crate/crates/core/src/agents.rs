//! Deterministic (DDPG/TD3-style) and stochastic (squashed diagonal Gaussian)
//! actor-critic learners, with optional off-policy correction weights, and
//! the training loop that drives them.
//!
//! Actions are handled in environment units. Exploration noise and the
//! deterministic correction's reference distribution are expressed in
//! normalized units, `(a - mid) / half` per action dimension, so a single
//! `exploration_std` means the same thing for every action range.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{EnvError, Environment};
use crate::metrics::{LambdaStats, MetricsError, MetricsRecord, MetricsSink};
use crate::nn::{
    concat_columns, score_function_gradient, soft_update, squash, Activation, Checkpoint, Gradients, Mlp, NnError,
    Optimizer, OptimizerKind, OutputHead, SquashedGaussianSample,
};
use crate::offpoc::{self, DiagonalGaussianBatch, OffPocConfig, OffPocError, Variant, WeightReport};
use crate::replay::{Batch, PolicyParams, ReplayBuffer, ReplayError, SamplerKind, Transition};
use crate::stats::{derive_seed, mean, std_dev};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    OffPoc(#[from] OffPocError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    Deterministic,
    Stochastic,
}

impl AgentKind {
    pub fn variant(self) -> Variant {
        match self {
            AgentKind::Deterministic => Variant::Deterministic,
            AgentKind::Stochastic => Variant::Stochastic,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Deterministic => "deterministic",
            AgentKind::Stochastic => "stochastic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Explore,
    Evaluate,
}

/// How the stochastic actor's gradient is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyGradient {
    Reparameterized,
    ScoreFunction,
}

/// TD3 target smoothing, in normalized action units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSmoothing {
    pub noise_std: f64,
    pub clip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub gamma: f64,
    /// Rewards are multiplied by this before entering the TD targets, so
    /// critics learn scaled values; the greedy policy is unaffected.
    pub reward_scale: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub exploration_std: f64,
    /// Uniform-random steps before the first update.
    pub exploration_steps: u64,
    pub twin_critics: bool,
    pub policy_delay: u64,
    pub target_policy_smoothing: Option<TargetSmoothing>,
    /// Fixed entropy coefficient (stochastic agent only).
    pub entropy_bonus: f64,
    pub offpoc: Option<OffPocConfig>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub optimizer: OptimizerKind,
    pub policy_gradient: PolicyGradient,
    /// Multiplier on the initial output-layer parameters of every network;
    /// small values start the actor near the centre of the action range.
    pub final_layer_scale: f64,
    /// Stochastic correction starts at `purge_multiple * exploration_steps`,
    /// when every older transition is dropped from the buffer.
    pub purge_multiple: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            reward_scale: 1.0,
            tau: 0.005,
            batch_size: 256,
            exploration_std: 0.1,
            exploration_steps: 1000,
            twin_critics: false,
            policy_delay: 1,
            target_policy_smoothing: None,
            entropy_bonus: 0.0,
            offpoc: None,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            optimizer: OptimizerKind::Adam,
            policy_gradient: PolicyGradient::Reparameterized,
            final_layer_scale: 0.01,
            purge_multiple: 2,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self, kind: AgentKind) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::Config(m));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must be in [0, 1), got {}", self.gamma));
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return bad(format!("reward_scale must be > 0, got {}", self.reward_scale));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must be in (0, 1], got {}", self.tau));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.exploration_std.is_finite() && self.exploration_std >= 0.0) {
            return bad(format!("exploration_std must be >= 0, got {}", self.exploration_std));
        }
        if self.exploration_steps == 0 {
            return bad("exploration_steps must be positive".into());
        }
        if self.policy_delay == 0 {
            return bad("policy_delay must be positive".into());
        }
        if self.purge_multiple == 0 {
            return bad("purge_multiple must be positive".into());
        }
        if let Some(sm) = self.target_policy_smoothing {
            if !(sm.noise_std >= 0.0 && sm.clip >= 0.0) {
                return bad("target_policy_smoothing needs noise_std >= 0 and clip >= 0".into());
            }
        }
        if !(self.entropy_bonus.is_finite() && self.entropy_bonus >= 0.0) {
            return bad(format!("entropy_bonus must be >= 0, got {}", self.entropy_bonus));
        }
        if kind == AgentKind::Deterministic && self.entropy_bonus != 0.0 {
            return bad("entropy_bonus applies to the stochastic agent only".into());
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.final_layer_scale > 0.0 && self.final_layer_scale.is_finite()) {
            return bad(format!("final_layer_scale must be > 0, got {}", self.final_layer_scale));
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if let Some(op) = &self.offpoc {
            op.validate()?;
            if kind == AgentKind::Deterministic {
                if self.batch_size < 2 {
                    return bad(format!(
                        "batch_size {} is too small for the deterministic correction: fitting the action-difference \
                         covariance divides by B - 1, so B >= 2 is required",
                        self.batch_size
                    ));
                }
                if op.exploration_std != self.exploration_std {
                    return bad(format!(
                        "offpoc exploration_std {} must match the agent's exploration_std {}",
                        op.exploration_std, self.exploration_std
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Output of [`Agent::act`].
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChoice {
    pub action: Vec<f64>,
    /// Pre-squash Gaussian parameters (stochastic agent only).
    pub policy_params: Option<PolicyParams>,
}

/// Per-sample loss coefficients. The critic loss is `sum_i critic[i] * delta_i^2`
/// and the actor maximizes `sum_i policy[i] * term_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCoefficients {
    pub critic: Vec<f64>,
    pub policy: Vec<f64>,
}

/// Builds the loss coefficients for a batch of `batch_size` rows.
///
/// Without a report both are `1/B` (critic rows also carry PER importance
/// weights when given). A deterministic report scales both by the batch
/// weight; a stochastic one uses `lambda_i^2/||lambda||_1` and `lambda_i/||lambda||_1`.
pub fn sample_coefficients(
    report: Option<&WeightReport>,
    is_weights: Option<&[f64]>,
    batch_size: usize,
) -> Result<SampleCoefficients, AgentError> {
    let b = batch_size as f64;
    let (mut critic, policy) = match report {
        None => (vec![1.0 / b; batch_size], vec![1.0 / b; batch_size]),
        Some(WeightReport::Deterministic { lambda, .. }) => (vec![lambda / b; batch_size], vec![lambda / b; batch_size]),
        Some(r @ WeightReport::Stochastic { .. }) => {
            let (c, p) = offpoc::stochastic_coefficients(r)?;
            if c.len() != batch_size {
                return Err(AgentError::Config(format!("{} weights for a batch of {batch_size}", c.len())));
            }
            (c, p)
        }
    };
    if let Some(w) = is_weights {
        if w.len() != batch_size {
            return Err(AgentError::Config(format!("{} sample weights for a batch of {batch_size}", w.len())));
        }
        critic.iter_mut().zip(w).for_each(|(c, w)| *c *= w);
    }
    Ok(SampleCoefficients { critic, policy })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticStep {
    /// Bootstrapped targets `y`.
    pub targets: Vec<f64>,
    /// `y - Q(S, A)` for the first critic.
    pub td_errors: Vec<f64>,
    /// Weighted loss of the first critic.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDiagnostics {
    pub td_errors: Vec<f64>,
    pub targets: Vec<f64>,
    pub critic_loss: f64,
    /// Present when the actor was updated this iteration.
    pub policy_objective: Option<f64>,
    pub lambda_report: Option<WeightReport>,
}

#[derive(Debug, Clone)]
pub struct Agent {
    kind: AgentKind,
    config: AgentConfig,
    state_dim: usize,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
    actor: Mlp,
    actor_target: Mlp,
    critics: Vec<Mlp>,
    critic_targets: Vec<Mlp>,
    actor_opt: Optimizer,
    critic_opts: Vec<Optimizer>,
    critic_updates: u64,
    actor_updates: u64,
}

impl Agent {
    pub fn new(
        kind: AgentKind,
        config: AgentConfig,
        state_dim: usize,
        action_low: &[f64],
        action_high: &[f64],
        seed: u64,
    ) -> Result<Self, AgentError> {
        config.validate(kind)?;
        let n = action_low.len();
        if n == 0 || action_high.len() != n || action_low.iter().zip(action_high).any(|(l, h)| !(l < h)) {
            return Err(AgentError::Config("action bounds must be non-empty with low < high".into()));
        }
        if state_dim == 0 {
            return Err(AgentError::Config("state_dim must be positive".into()));
        }
        let mut actor_sizes = vec![state_dim];
        actor_sizes.extend(&config.hidden);
        actor_sizes.push(n);
        let head = match kind {
            AgentKind::Deterministic => OutputHead::TanhScaled { low: action_low.to_vec(), high: action_high.to_vec() },
            AgentKind::Stochastic => OutputHead::gaussian(),
        };
        let actor = Mlp::new(&actor_sizes, config.activation, head, derive_seed(seed, 0))?
            .with_final_layer_scale(config.final_layer_scale);
        let mut critic_sizes = vec![state_dim + n];
        critic_sizes.extend(&config.hidden);
        critic_sizes.push(1);
        let count = if config.twin_critics { 2 } else { 1 };
        let critics = (0..count)
            .map(|k| {
                Mlp::new(&critic_sizes, config.activation, OutputHead::Identity, derive_seed(seed, 1 + k))
                    .map(|c| c.with_final_layer_scale(config.final_layer_scale))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let actor_opt = Optimizer::new(config.optimizer, &actor, config.actor_lr);
        let critic_opts = critics.iter().map(|c| Optimizer::new(config.optimizer, c, config.critic_lr)).collect();
        Ok(Self {
            kind,
            state_dim,
            action_low: action_low.to_vec(),
            action_high: action_high.to_vec(),
            actor_target: actor.clone(),
            critic_targets: critics.clone(),
            actor,
            critics,
            actor_opt,
            critic_opts,
            critic_updates: 0,
            actor_updates: 0,
            config,
        })
    }

    pub fn kind(&self) -> AgentKind {
        self.kind
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_low.len()
    }

    pub fn action_bounds(&self) -> (&[f64], &[f64]) {
        (&self.action_low, &self.action_high)
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn actor_target(&self) -> &Mlp {
        &self.actor_target
    }

    pub fn critics(&self) -> &[Mlp] {
        &self.critics
    }

    pub fn critic_targets(&self) -> &[Mlp] {
        &self.critic_targets
    }

    /// Replaces the online actor (tests and fine-tuning); targets are untouched.
    pub fn set_actor(&mut self, actor: Mlp) -> Result<(), AgentError> {
        if actor.param_count() != self.actor.param_count() || actor.head() != self.actor.head() {
            return Err(AgentError::Config("replacement actor does not match the architecture".into()));
        }
        self.actor_opt = Optimizer::new(self.config.optimizer, &actor, self.config.actor_lr);
        self.actor = actor;
        Ok(())
    }

    /// Replaces critic `k` (tests); targets are untouched.
    pub fn set_critic(&mut self, k: usize, critic: Mlp) -> Result<(), AgentError> {
        let slot = self.critics.get(k).ok_or_else(|| AgentError::Config(format!("no critic {k}")))?;
        if critic.param_count() != slot.param_count() {
            return Err(AgentError::Config("replacement critic does not match the architecture".into()));
        }
        self.critic_opts[k] = Optimizer::new(self.config.optimizer, &critic, self.config.critic_lr);
        self.critics[k] = critic;
        Ok(())
    }

    pub fn critic_updates(&self) -> u64 {
        self.critic_updates
    }

    pub fn actor_updates(&self) -> u64 {
        self.actor_updates
    }

    fn half_range(&self, j: usize) -> f64 {
        0.5 * (self.action_high[j] - self.action_low[j])
    }

    fn clip(&self, a: &mut Array2<f64>) {
        for mut row in a.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = v.clamp(self.action_low[j], self.action_high[j]);
            }
        }
    }

    /// Maps actions onto `[-1, 1]` per dimension.
    pub fn normalize_actions(&self, a: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = a.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let mid = 0.5 * (self.action_high[j] + self.action_low[j]);
                *v = (*v - mid) / self.half_range(j);
            }
        }
        out
    }

    fn check_states(&self, states: ArrayView2<'_, f64>) -> Result<(), AgentError> {
        if states.ncols() != self.state_dim {
            return Err(NnError::Shape(format!("states have {} columns, expected {}", states.ncols(), self.state_dim)).into());
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("state".into()).into());
        }
        Ok(())
    }

    /// Actor output for a batch: actions (deterministic) or `[mean | log_std]` (stochastic).
    pub fn actor_output(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>, AgentError> {
        self.check_states(states)?;
        let out = self.actor.predict(states)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite(format!("actor output {out:?}")).into());
        }
        Ok(out)
    }

    /// Noise-free actions for a batch of states.
    pub fn greedy_actions(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>, AgentError> {
        let out = self.actor_output(states)?;
        Ok(match self.kind {
            AgentKind::Deterministic => out,
            AgentKind::Stochastic => squash(out.slice(s![.., ..self.action_dim()]), &self.action_low, &self.action_high),
        })
    }

    pub fn act(&self, state: &[f64], mode: ActMode, rng: &mut impl Rng) -> Result<ActionChoice, AgentError> {
        if state.len() != self.state_dim {
            return Err(NnError::Shape(format!("state has {} entries, expected {}", state.len(), self.state_dim)).into());
        }
        let x = ArrayView2::from_shape((1, self.state_dim), state).expect("length checked");
        let n = self.action_dim();
        let out = self.actor_output(x)?;
        match (self.kind, mode) {
            (AgentKind::Deterministic, ActMode::Evaluate) => Ok(ActionChoice { action: out.row(0).to_vec(), policy_params: None }),
            (AgentKind::Deterministic, ActMode::Explore) => {
                let mut a = out;
                for j in 0..n {
                    let eps: f64 = rng.sample(StandardNormal);
                    a[[0, j]] += self.config.exploration_std * self.half_range(j) * eps;
                }
                self.clip(&mut a);
                Ok(ActionChoice { action: a.row(0).to_vec(), policy_params: None })
            }
            (AgentKind::Stochastic, mode) => {
                let mean = out.slice(s![.., ..n]);
                let std: Vec<f64> = out.slice(s![0, n..]).iter().map(|l| l.exp()).collect();
                let params = PolicyParams { mean: mean.row(0).to_vec(), std: std.clone() };
                let action = match mode {
                    ActMode::Evaluate => squash(mean, &self.action_low, &self.action_high),
                    ActMode::Explore => {
                        let noise = Array2::from_shape_fn((1, n), |_| rng.sample(StandardNormal));
                        SquashedGaussianSample::new(out.view(), noise.view(), &self.action_low, &self.action_high)?.action
                    }
                };
                Ok(ActionChoice { action: action.row(0).to_vec(), policy_params: Some(params) })
            }
        }
    }

    /// Correction weights of the current actor against a stored batch.
    pub fn weight_report(&self, batch: &Batch, cfg: &OffPocConfig, seed: u64) -> Result<WeightReport, AgentError> {
        match self.kind {
            AgentKind::Deterministic => {
                let current = self.normalize_actions(self.actor_output(batch.states.view())?.view());
                let stored = self.normalize_actions(batch.actions.view());
                Ok(offpoc::deterministic_weight(current.view(), stored.view(), cfg, seed)?)
            }
            AgentKind::Stochastic => {
                let (Some(mu), Some(sd)) = (&batch.policy_mean, &batch.policy_std) else {
                    return Err(AgentError::Config(
                        "stochastic correction needs behavioral policy parameters on every sampled transition".into(),
                    ));
                };
                let n = self.action_dim();
                let out = self.actor_output(batch.states.view())?;
                let current =
                    DiagonalGaussianBatch::new(out.slice(s![.., ..n]).to_owned(), out.slice(s![.., n..]).mapv(f64::exp))?;
                let stored = DiagonalGaussianBatch::new(mu.clone(), sd.clone())?;
                Ok(offpoc::stochastic_weights(&current, &stored, cfg, seed)?)
            }
        }
    }

    /// Bootstrapped targets `y = c r + gamma (1 - done) (min_k Q'_k(s', a') - alpha log pi'(a'|s'))`.
    ///
    /// `next_noise` (`B x n`, standard normal) drives target smoothing for the
    /// deterministic agent and the next-action draw for the stochastic one.
    pub fn td_targets(&self, batch: &Batch, next_noise: ArrayView2<'_, f64>) -> Result<Array1<f64>, AgentError> {
        let n = self.action_dim();
        let b = batch.rewards.len();
        if next_noise.dim() != (b, n) {
            return Err(NnError::Shape(format!("next noise {:?}, expected {:?}", next_noise.dim(), (b, n))).into());
        }
        self.check_states(batch.next_states.view())?;
        let out = self.actor_target.predict(batch.next_states.view())?;
        let (next_actions, log_prob) = match self.kind {
            AgentKind::Deterministic => {
                let mut a = out;
                if let Some(sm) = self.config.target_policy_smoothing {
                    for i in 0..b {
                        for j in 0..n {
                            let e = (sm.noise_std * next_noise[[i, j]]).clamp(-sm.clip, sm.clip);
                            a[[i, j]] += e * self.half_range(j);
                        }
                    }
                    self.clip(&mut a);
                }
                (a, None)
            }
            AgentKind::Stochastic => {
                let sample = SquashedGaussianSample::new(out.view(), next_noise, &self.action_low, &self.action_high)?;
                (sample.action, Some(sample.log_prob))
            }
        };
        let x = concat_columns(batch.next_states.view(), next_actions.view())?;
        let mut q_next = Array1::from_elem(b, f64::INFINITY);
        for t in &self.critic_targets {
            let q = t.predict(x.view())?;
            q_next.iter_mut().zip(q.column(0)).for_each(|(m, v)| *m = m.min(*v));
        }
        if let Some(lp) = log_prob {
            q_next.scaled_add(-self.config.entropy_bonus, &lp);
        }
        let y = &batch.rewards * self.config.reward_scale + &((1.0 - &batch.dones) * self.config.gamma * q_next);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("td target".into()).into());
        }
        Ok(y)
    }

    /// Weighted squared TD loss of critic `k` and its parameter gradient.
    /// Returns `(loss, td_errors, gradients)`.
    pub fn critic_loss_grad(
        &self,
        k: usize,
        batch: &Batch,
        targets: &[f64],
        coefficients: &[f64],
    ) -> Result<(f64, Vec<f64>, Gradients), AgentError> {
        let critic = self.critics.get(k).ok_or_else(|| AgentError::Config(format!("no critic {k}")))?;
        let b = batch.rewards.len();
        if targets.len() != b || coefficients.len() != b {
            return Err(AgentError::Config(format!("{} targets / {} coefficients for {b} rows", targets.len(), coefficients.len())));
        }
        let x = concat_columns(batch.states.view(), batch.actions.view())?;
        let (q, cache) = critic.forward(x.view())?;
        let td: Vec<f64> = targets.iter().zip(q.column(0)).map(|(y, q)| y - q).collect();
        let loss = td.iter().zip(coefficients).map(|(d, c)| c * d * d).sum::<f64>();
        let grad_out = Array2::from_shape_fn((b, 1), |(i, _)| -2.0 * coefficients[i] * td[i]);
        let (grads, _) = critic.backward(&cache, grad_out.view())?;
        Ok((loss, td, grads))
    }

    /// Actor objective `J` (to be maximized) and the gradient of `-J` with
    /// respect to the actor parameters. `noise` is `B x n` standard normal
    /// (ignored by the deterministic agent).
    pub fn actor_objective_grad(
        &self,
        states: ArrayView2<'_, f64>,
        noise: ArrayView2<'_, f64>,
        coefficients: &[f64],
    ) -> Result<(f64, Gradients), AgentError> {
        self.check_states(states)?;
        let b = states.nrows();
        let n = self.action_dim();
        if coefficients.len() != b {
            return Err(AgentError::Config(format!("{} coefficients for {b} rows", coefficients.len())));
        }
        let critic = &self.critics[0];
        let (head, actor_cache) = self.actor.forward(states)?;
        let grad_q = Array2::from_shape_fn((b, 1), |(i, _)| -coefficients[i]);
        let (objective, grad_head) = match self.kind {
            AgentKind::Deterministic => {
                let x = concat_columns(states, head.view())?;
                let (q, cache) = critic.forward(x.view())?;
                let j: f64 = q.column(0).iter().zip(coefficients).map(|(q, c)| c * q).sum();
                let (_, gin) = critic.backward(&cache, grad_q.view())?;
                (j, gin.slice(s![.., self.state_dim..]).to_owned())
            }
            AgentKind::Stochastic => {
                if noise.dim() != (b, n) {
                    return Err(NnError::Shape(format!("policy noise {:?}, expected {:?}", noise.dim(), (b, n))).into());
                }
                let alpha = self.config.entropy_bonus;
                let sample = SquashedGaussianSample::new(head.view(), noise, &self.action_low, &self.action_high)?;
                let x = concat_columns(states, sample.action.view())?;
                let (q, cache) = critic.forward(x.view())?;
                let terms: Vec<f64> = q.column(0).iter().zip(&sample.log_prob).map(|(q, lp)| q - alpha * lp).collect();
                let j: f64 = terms.iter().zip(coefficients).map(|(t, c)| c * t).sum();
                match self.config.policy_gradient {
                    PolicyGradient::Reparameterized => {
                        let (_, gin) = critic.backward(&cache, grad_q.view())?;
                        let grad_action = gin.slice(s![.., self.state_dim..]).to_owned();
                        let grad_lp = Array1::from_iter(coefficients.iter().map(|c| c * alpha));
                        (j, sample.backward(grad_action.view(), grad_lp.view()))
                    }
                    PolicyGradient::ScoreFunction => {
                        // baseline: the critic at the squashed mean action
                        let greedy = squash(sample.mean.view(), &self.action_low, &self.action_high);
                        let base = critic.predict(concat_columns(states, greedy.view())?.view())?;
                        let coeff = Array1::from_iter((0..b).map(|i| -coefficients[i] * (terms[i] - base[[i, 0]])));
                        let g = score_function_gradient(
                            sample.pre_squash.view(),
                            sample.mean.view(),
                            sample.log_std.view(),
                            coeff.view(),
                        );
                        (j, g)
                    }
                }
            }
        };
        let (grads, _) = self.actor.backward(&actor_cache, grad_head.view())?;
        Ok((objective, grads))
    }

    /// One gradient step on every critic toward shared targets.
    pub fn critic_update(
        &mut self,
        batch: &Batch,
        coefficients: &SampleCoefficients,
        rng: &mut impl Rng,
    ) -> Result<CriticStep, AgentError> {
        let b = batch.rewards.len();
        let noise = Array2::from_shape_fn((b, self.action_dim()), |_| rng.sample(StandardNormal));
        let targets = self.td_targets(batch, noise.view())?.to_vec();
        let mut first = None;
        for k in 0..self.critics.len() {
            let (loss, td, grads) = self.critic_loss_grad(k, batch, &targets, &coefficients.critic)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(NnError::NonFinite(format!("critic {k} loss {loss}")).into());
            }
            self.critic_opts[k].step(&mut self.critics[k], &grads)?;
            first.get_or_insert((loss, td));
        }
        self.critic_updates += 1;
        let (loss, td_errors) = first.expect("at least one critic");
        Ok(CriticStep { targets, td_errors, loss })
    }

    /// One ascent step on the actor objective, then Polyak updates of all targets.
    pub fn actor_update(
        &mut self,
        states: ArrayView2<'_, f64>,
        coefficients: &SampleCoefficients,
        rng: &mut impl Rng,
    ) -> Result<f64, AgentError> {
        let noise = Array2::from_shape_fn((states.nrows(), self.action_dim()), |_| rng.sample(StandardNormal));
        let (objective, grads) = self.actor_objective_grad(states, noise.view(), &coefficients.policy)?;
        if !objective.is_finite() || !grads.is_finite() {
            return Err(NnError::NonFinite(format!("policy objective {objective}")).into());
        }
        self.actor_opt.step(&mut self.actor, &grads)?;
        self.actor_updates += 1;
        self.update_targets()?;
        Ok(objective)
    }

    pub fn update_targets(&mut self) -> Result<(), AgentError> {
        let tau = self.config.tau;
        soft_update(&mut self.actor_target, &self.actor, tau)?;
        for (t, c) in self.critic_targets.iter_mut().zip(&self.critics) {
            soft_update(t, c, tau)?;
        }
        Ok(())
    }

    /// One training iteration: sample, weight (when `correct`), update the
    /// critics, and the actor every `policy_delay` iterations.
    pub fn update(
        &mut self,
        buffer: &mut ReplayBuffer,
        correct: bool,
        weight_seed: u64,
        rng: &mut impl Rng,
    ) -> Result<UpdateDiagnostics, AgentError> {
        let picked = buffer.sample(self.config.batch_size, rng)?;
        let batch = buffer.gather(&picked.indices)?;
        let report = match (&self.config.offpoc, correct) {
            (Some(cfg), true) => Some(self.weight_report(&batch, cfg, weight_seed)?),
            _ => None,
        };
        let coefficients = sample_coefficients(report.as_ref(), picked.is_weights.as_deref(), picked.indices.len())?;
        let critic = self.critic_update(&batch, &coefficients, rng)?;
        if matches!(buffer.sampler(), SamplerKind::Per { .. }) {
            buffer.update_priorities(&picked.indices, &critic.td_errors)?;
        }
        let policy_objective = if self.critic_updates % self.config.policy_delay == 0 {
            Some(self.actor_update(batch.states.view(), &coefficients, rng)?)
        } else {
            None
        };
        Ok(UpdateDiagnostics {
            td_errors: critic.td_errors,
            targets: critic.targets,
            critic_loss: critic.loss,
            policy_objective,
            lambda_report: report,
        })
    }

    /// Networks plus enough metadata to rebuild the agent. Optimizer moments
    /// are not saved.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = serde_json::json!({
            "kind": self.kind,
            "config": self.config,
            "state_dim": self.state_dim,
            "action_low": self.action_low,
            "action_high": self.action_high,
            "critic_updates": self.critic_updates,
            "actor_updates": self.actor_updates,
            "extra": extra,
        });
        let mut ck = Checkpoint::new(meta).with_network("actor", &self.actor).with_network("actor_target", &self.actor_target);
        for (k, (c, t)) in self.critics.iter().zip(&self.critic_targets).enumerate() {
            ck = ck.with_network(&format!("critic{}", k + 1), c).with_network(&format!("critic{}_target", k + 1), t);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, AgentError> {
        let meta = &ck.metadata;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| AgentError::Config(format!("checkpoint metadata lacks {k}")));
        let parse = |e: serde_json::Error| AgentError::Config(format!("checkpoint metadata: {e}"));
        let kind: AgentKind = serde_json::from_value(field("kind")?).map_err(parse)?;
        let config: AgentConfig = serde_json::from_value(field("config")?).map_err(parse)?;
        let state_dim: usize = serde_json::from_value(field("state_dim")?).map_err(parse)?;
        let low: Vec<f64> = serde_json::from_value(field("action_low")?).map_err(parse)?;
        let high: Vec<f64> = serde_json::from_value(field("action_high")?).map_err(parse)?;
        let mut agent = Agent::new(kind, config, state_dim, &low, &high, 0)?;
        let take = |name: &str, like: &Mlp| -> Result<Mlp, AgentError> {
            let net = ck.network(name).ok_or_else(|| AgentError::Config(format!("checkpoint lacks network {name}")))?;
            if net.param_count() != like.param_count() || net.head() != like.head() || net.in_dim() != like.in_dim() {
                return Err(AgentError::Config(format!("network {name} does not match the recorded architecture")));
            }
            Ok(net.clone())
        };
        agent.actor = take("actor", &agent.actor)?;
        agent.actor_target = take("actor_target", &agent.actor_target)?;
        for k in 0..agent.critics.len() {
            agent.critics[k] = take(&format!("critic{}", k + 1), &agent.critics[k])?;
            agent.critic_targets[k] = take(&format!("critic{}_target", k + 1), &agent.critic_targets[k])?;
        }
        agent.actor_opt = Optimizer::new(agent.config.optimizer, &agent.actor, agent.config.actor_lr);
        agent.critic_opts =
            agent.critics.iter().map(|c| Optimizer::new(agent.config.optimizer, c, agent.config.critic_lr)).collect();
        agent.critic_updates = meta.get("critic_updates").and_then(|v| v.as_u64()).unwrap_or(0);
        agent.actor_updates = meta.get("actor_updates").and_then(|v| v.as_u64()).unwrap_or(0);
        Ok(agent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSummary {
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Mean optimal return over the same initial states, when the env knows it.
    pub optimal_mean: Option<f64>,
}

/// Seeds for evaluation episodes, fixed per run seed.
pub fn evaluation_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    let base = derive_seed(seed, STREAM_EVAL);
    (0..episodes as u64).map(|i| derive_seed(base, i)).collect()
}

/// Runs one noise-free episode per seed and summarizes undiscounted returns.
pub fn evaluate(agent: &Agent, env: &mut dyn Environment, seeds: &[u64]) -> Result<EvaluationSummary, AgentError> {
    let spec = env.spec().clone();
    if spec.state_dim != agent.state_dim() || spec.action_dim != agent.action_dim() {
        return Err(AgentError::Config(format!(
            "agent dims ({}, {}) do not match {} ({}, {})",
            agent.state_dim(),
            agent.action_dim(),
            spec.name,
            spec.state_dim,
            spec.action_dim
        )));
    }
    // evaluation never draws noise; the generator only satisfies the signature
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut returns = Vec::with_capacity(seeds.len());
    let mut optimal = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut state = env.reset(seed);
        if let Some(o) = env.optimal_return(&state) {
            optimal.push(o);
        }
        let mut total = 0.0;
        loop {
            let a = agent.act(&state, ActMode::Evaluate, &mut unused)?;
            let r = env.step(&a.action)?;
            total += r.reward;
            state = r.next_state;
            if r.done || r.truncated {
                break;
            }
        }
        returns.push(total);
    }
    let optimal_mean = (!optimal.is_empty() && optimal.len() == returns.len()).then(|| mean(&optimal));
    Ok(EvaluationSummary { mean: mean(&returns), std: std_dev(&returns), returns, optimal_mean })
}

const STREAM_ENV: u64 = 10;
const STREAM_NOISE: u64 = 11;
const STREAM_UPDATE: u64 = 12;
const STREAM_WEIGHTS: u64 = 13;
const STREAM_EVAL: u64 = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Environment steps between diagnostics records.
    pub diagnostics_interval: u64,
    /// Environment steps per training iteration once updates start.
    pub update_interval: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { total_steps: 10_000, eval_interval: 1000, eval_episodes: 10, diagnostics_interval: 1000, update_interval: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub updates: u64,
    pub episodes: u64,
    pub final_evaluation: Option<EvaluationSummary>,
    /// Every weight produced during training, in order.
    pub lambda_count: u64,
    pub lambda_min: Option<f64>,
    pub lambda_max: Option<f64>,
}

/// Training loop: uniform exploration, then collect, store, sample, weight,
/// update critics, delayed actor and targets. Evaluates on `eval_env` every
/// `eval_interval` steps and after the last step.
pub fn train(
    agent: &mut Agent,
    env: &mut dyn Environment,
    eval_env: &mut dyn Environment,
    buffer: &mut ReplayBuffer,
    settings: &TrainSettings,
    seed: u64,
    sink: &mut dyn MetricsSink,
) -> Result<TrainSummary, AgentError> {
    let cfg = agent.config().clone();
    if settings.total_steps <= cfg.exploration_steps {
        return Err(AgentError::Config(format!(
            "total_steps {} must exceed exploration_steps {}",
            settings.total_steps, cfg.exploration_steps
        )));
    }
    if settings.eval_interval == 0 || settings.diagnostics_interval == 0 || settings.update_interval == 0 {
        return Err(AgentError::Config("eval, diagnostics and update intervals must be positive".into()));
    }
    if cfg.batch_size > buffer.capacity() {
        return Err(AgentError::Config(format!("batch_size {} exceeds buffer capacity {}", cfg.batch_size, buffer.capacity())));
    }
    let spec = env.spec().clone();
    if spec.state_dim != agent.state_dim() || spec.action_dim != agent.action_dim() {
        return Err(AgentError::Config(format!("agent dims do not match {}", spec.name)));
    }
    let env_seed = derive_seed(seed, STREAM_ENV);
    let weight_seed = derive_seed(seed, STREAM_WEIGHTS);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_NOISE));
    let mut update_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_UPDATE));
    let eval_seeds = evaluation_seeds(seed, settings.eval_episodes);
    let stochastic_correction = agent.kind() == AgentKind::Stochastic && cfg.offpoc.is_some();
    let cutoff = cfg.exploration_steps.saturating_mul(cfg.purge_multiple);

    let mut episodes = 0u64;
    let mut state = env.reset(derive_seed(env_seed, episodes));
    let mut updates = 0u64;
    let mut last: Option<UpdateDiagnostics> = None;
    let mut last_objective = None;
    let mut window: Vec<f64> = Vec::new();
    let (mut lambda_count, mut lambda_min, mut lambda_max) = (0u64, None::<f64>, None::<f64>);
    let mut final_evaluation = None;

    for t in 0..settings.total_steps {
        if stochastic_correction && t == cutoff {
            buffer.purge_exploration(cutoff);
        }
        let choice = if t < cfg.exploration_steps {
            let action = (0..spec.action_dim)
                .map(|j| noise_rng.random_range(spec.action_low[j]..=spec.action_high[j]))
                .collect();
            ActionChoice { action, policy_params: None }
        } else {
            agent.act(&state, ActMode::Explore, &mut noise_rng)?
        };
        let step = env.step(&choice.action)?;
        buffer.push(Transition {
            state: std::mem::take(&mut state),
            action: choice.action,
            reward: step.reward,
            next_state: step.next_state.clone(),
            done: step.done,
            policy_params: choice.policy_params,
            birth_step: t,
        })?;
        state = if step.done || step.truncated {
            episodes += 1;
            env.reset(derive_seed(env_seed, episodes))
        } else {
            step.next_state
        };

        if t >= cfg.exploration_steps && buffer.len() >= cfg.batch_size && (t - cfg.exploration_steps) % settings.update_interval == 0 {
            let correct = cfg.offpoc.is_some() && (!stochastic_correction || t >= cutoff);
            let diag = agent
                .update(buffer, correct, derive_seed(weight_seed, updates), &mut update_rng)
                .map_err(|e| match e {
                    AgentError::Nn(NnError::NonFinite(what)) => AgentError::NonFinite { step: t, what },
                    other => other,
                })?;
            updates += 1;
            if let Some(r) = &diag.lambda_report {
                for (l, _) in r.pairs() {
                    window.push(l);
                    lambda_count += 1;
                    lambda_min = Some(lambda_min.map_or(l, |m| m.min(l)));
                    lambda_max = Some(lambda_max.map_or(l, |m| m.max(l)));
                }
            }
            if diag.policy_objective.is_some() {
                last_objective = diag.policy_objective;
            }
            last = Some(diag);
        }

        let done_steps = t + 1;
        if done_steps % settings.diagnostics_interval == 0 {
            if let Some(d) = &last {
                let lambda: Option<Vec<f64>> = d.lambda_report.as_ref().map(|r| r.pairs().map(|(l, _)| l).collect());
                sink.record(&MetricsRecord::Diagnostics {
                    step: done_steps,
                    updates,
                    critic_loss: d.critic_loss,
                    policy_objective: last_objective,
                    mean_abs_td: d.td_errors.iter().map(|x| x.abs()).sum::<f64>() / d.td_errors.len() as f64,
                    lambda: lambda.as_deref().and_then(LambdaStats::from_values),
                    lambda_window: LambdaStats::from_values(&window),
                    buffer_size: buffer.len(),
                })?;
                window.clear();
            }
        }
        if done_steps % settings.eval_interval == 0 || done_steps == settings.total_steps {
            let summary = evaluate(agent, eval_env, &eval_seeds)?;
            sink.record(&MetricsRecord::Evaluation {
                step: done_steps,
                episodes: summary.returns.len(),
                mean_return: summary.mean,
                std_return: summary.std,
                returns: summary.returns.clone(),
                optimal_mean_return: summary.optimal_mean,
            })?;
            final_evaluation = Some(summary);
        }
    }
    Ok(TrainSummary {
        steps: settings.total_steps,
        updates,
        episodes,
        final_evaluation,
        lambda_count,
        lambda_min,
        lambda_max,
    })
}

/// Stacks rows of equal length into a matrix.
pub fn stack_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>, AgentError> {
    let cols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| AgentError::Config(format!("ragged rows: {e}")))
}
