//! Per-subnetwork learners: double DQN with experience replay and PPO with
//! a clipped surrogate and a learned critic.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::{
    accumulate_logit_grad, adam_step, clip_grad_norm, forward, forward_trace, init, log_softmax, polyak_update, softmax,
    Activation, AdamState, MlpSpec, Optimizer, OutputHead, ParamVector,
};
use crate::rng;
use crate::{Error, Result};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferMode {
    Shared,
    Individual,
}

/// FIFO ring of transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    pub capacity: usize,
    pub mode: BufferMode,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, mode: BufferMode) -> Self {
        Self { items: VecDeque::with_capacity(capacity.min(1 << 16)), capacity: capacity.max(1), mode }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// Distinct indices drawn uniformly; at most `len()` of them.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<usize> {
        index::sample(rng, self.len(), batch.min(self.len())).into_vec()
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<Transition> {
        self.sample_indices(batch, rng).into_iter().map(|i| self.items[i].clone()).collect()
    }
}

/// Linear decay from `start` to `end` over the first `decay_fraction` of
/// the episodes, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_fraction: f64,
}

impl EpsilonSchedule {
    pub fn value(&self, episode: usize, total_episodes: usize) -> f64 {
        let horizon = (self.decay_fraction * total_episodes as f64).max(1.0);
        let frac = (episode as f64 / horizon).min(1.0);
        (self.start + (self.end - self.start) * frac).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdqnConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub discount: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub polyak_tau: f64,
    pub learning_rate: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_fraction: f64,
    /// Transitions stored before the first update.
    pub warmup: usize,
    /// Environment steps between gradient updates.
    pub train_every: u64,
    pub grad_clip: f64,
}

impl Default for DdqnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            discount: 0.99,
            batch_size: 64,
            replay_capacity: 100_000,
            polyak_tau: 0.005,
            learning_rate: 3e-4,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.6,
            warmup: 1000,
            train_every: 1,
            grad_clip: 10.0,
        }
    }
}

impl DdqnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::config("ddqn discount must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.train_every == 0 {
            return Err(Error::config("batch_size, replay_capacity and train_every must be positive"));
        }
        if !(self.polyak_tau > 0.0 && self.polyak_tau <= 1.0) || !(self.learning_rate > 0.0) {
            return Err(Error::config("polyak_tau must lie in (0, 1] and learning_rate be positive"));
        }
        for e in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::config("epsilon bounds must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn epsilon_schedule(&self) -> EpsilonSchedule {
        EpsilonSchedule { start: self.epsilon_start, end: self.epsilon_end, decay_fraction: self.epsilon_decay_fraction }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdqnAgent {
    pub spec: MlpSpec,
    pub online: ParamVector,
    pub target: ParamVector,
    pub adam: AdamState,
    pub epsilon: f64,
    pub config: DdqnConfig,
    pub buffer: ReplayBuffer,
    pub updates: u64,
}

impl DdqnAgent {
    pub fn new(obs_dim: usize, num_actions: usize, config: DdqnConfig, mode: BufferMode, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = MlpSpec::with_hidden(obs_dim, &config.hidden, num_actions, config.activation, OutputHead::Linear)?;
        let online = init(&spec, seed);
        Ok(Self {
            target: online.clone(),
            adam: AdamState::new(online.len(), config.learning_rate),
            online,
            epsilon: config.epsilon_start,
            buffer: ReplayBuffer::new(config.replay_capacity, mode),
            spec,
            config,
            updates: 0,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn q_values(&self, obs: &[f64]) -> Result<Vec<f64>> {
        forward(&self.online, &self.spec, obs)
    }

    pub fn act_greedy(&self, obs: &[f64]) -> Result<usize> {
        Ok(argmax(&self.q_values(obs)?))
    }

    /// Uniform action with probability epsilon, else the greedy one.
    pub fn act_epsilon_greedy<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<usize> {
        let explore = rng.random::<f64>() < self.epsilon;
        let uniform = rng.random_range(0..self.num_actions());
        if explore {
            Ok(uniform)
        } else {
            self.act_greedy(obs)
        }
    }

    /// `r` for terminal transitions, otherwise `r + discount * Q_target(s', argmax_a Q_online(s', a))`.
    pub fn bellman_target(&self, t: &Transition) -> Result<f64> {
        if t.done {
            return Ok(t.reward);
        }
        let a = argmax(&forward(&self.online, &self.spec, &t.next_state)?);
        let q = forward(&self.target, &self.spec, &t.next_state)?[a];
        Ok(t.reward + self.config.discount * q)
    }

    /// Mean squared Bellman error on `batch` without updating anything.
    pub fn loss(&self, batch: &[Transition]) -> Result<f64> {
        let mut total = 0.0;
        for t in batch {
            let y = self.bellman_target(t)?;
            let q = self.q_values(&t.state)?[t.action];
            total += (y - q).powi(2);
        }
        Ok(total / batch.len() as f64)
    }

    /// One optimiser step on the mean squared Bellman error followed by a
    /// polyak step of the target network. Returns the pre-update loss.
    pub fn ddqn_update(&mut self, batch: &[Transition]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::domain("empty minibatch"));
        }
        let b = batch.len() as f64;
        let k = self.num_actions();
        let mut grad = vec![0.0; self.online.len()];
        let mut loss = 0.0;
        let mut upstream = vec![0.0; k];
        for t in batch {
            if t.action >= k {
                return Err(Error::InvalidAction { subnetwork: 0, channel: t.action, num_channels: k });
            }
            let y = self.bellman_target(t)?;
            let trace = forward_trace(&self.online, &self.spec, &t.state)?;
            let err = trace.output[t.action] - y;
            loss += err * err;
            upstream.fill(0.0);
            upstream[t.action] = 2.0 * err / b;
            accumulate_logit_grad(&self.online, &self.spec, &trace, &upstream, &mut grad);
        }
        clip_grad_norm(&mut grad, self.config.grad_clip);
        adam_step(&mut self.online, &grad, &mut self.adam)?;
        polyak_update(&mut self.target, &self.online, self.config.polyak_tau)?;
        self.updates += 1;
        Ok(loss / b)
    }

    /// Samples a minibatch from the agent's buffer and updates, once the
    /// warm-up threshold is met.
    pub fn train_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<f64>> {
        if self.buffer.len() < self.config.warmup.max(self.config.batch_size).max(1) {
            return Ok(None);
        }
        let batch = self.buffer.sample(self.config.batch_size, rng);
        self.ddqn_update(&batch).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub activation: Activation,
    pub discount: f64,
    pub gae_lambda: f64,
    pub clip_eta: f64,
    pub epochs: usize,
    pub minibatch: usize,
    /// Environment steps between updates.
    pub rollout_steps: u64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub entropy_coef: f64,
    pub grad_clip: f64,
    pub optimizer: Optimizer,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            activation: Activation::Tanh,
            discount: 0.99,
            gae_lambda: 0.95,
            clip_eta: 0.2,
            epochs: 4,
            minibatch: 64,
            rollout_steps: 256,
            actor_lr: 3e-4,
            critic_lr: 1e-3,
            entropy_coef: 0.0,
            grad_clip: 0.5,
            optimizer: Optimizer::Adam,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.discount) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::config("ppo discount must lie in [0, 1) and gae_lambda in [0, 1]"));
        }
        if !(self.clip_eta > 0.0) {
            return Err(Error::config("clip_eta must be positive"));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.rollout_steps == 0 {
            return Err(Error::config("epochs, minibatch and rollout_steps must be positive"));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub state: Vec<f64>,
    pub action: usize,
    pub logp: f64,
    pub reward: f64,
    pub value: f64,
    /// Episode ended after this record.
    pub done: bool,
}

/// Consecutive records of one agent plus the value estimate of the state
/// that follows the last record (ignored when it is terminal).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<RolloutRecord>,
    pub bootstrap_value: f64,
}

/// GAE(lambda) advantages and returns (`advantage + value`) for one
/// trajectory, without normalisation.
pub fn compute_advantages(records: &[RolloutRecord], bootstrap_value: f64, discount: f64, gae_lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let mut adv = vec![0.0; records.len()];
    let mut gae = 0.0;
    let mut next_value = bootstrap_value;
    for (t, r) in records.iter().enumerate().rev() {
        let live = if r.done { 0.0 } else { 1.0 };
        let delta = r.reward + discount * next_value * live - r.value;
        gae = delta + discount * gae_lambda * live * gae;
        adv[t] = gae;
        next_value = r.value;
    }
    let returns = adv.iter().zip(records).map(|(a, r)| a + r.value).collect();
    (adv, returns)
}

/// Zero mean, unit variance; left centred only when the spread is tiny.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / std.max(1e-8);
    }
}

/// `min(r A, clip(r, 1 - eta, 1 + eta) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eta: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eta, 1.0 + eta) * advantage)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoAgent {
    pub actor_spec: MlpSpec,
    pub critic_spec: MlpSpec,
    pub actor: ParamVector,
    pub critic: ParamVector,
    pub actor_adam: AdamState,
    pub critic_adam: AdamState,
    pub config: PpoConfig,
    open: Vec<Vec<RolloutRecord>>,
    finished: Vec<Trajectory>,
    pub updates: u64,
}

impl PpoAgent {
    /// `streams` is the number of agents whose experience this learner pools.
    pub fn new(obs_dim: usize, num_actions: usize, config: PpoConfig, streams: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let actor_spec = MlpSpec::with_hidden(obs_dim, &config.actor_hidden, num_actions, config.activation, OutputHead::Softmax)?;
        let critic_spec = MlpSpec::with_hidden(obs_dim, &config.critic_hidden, 1, config.activation, OutputHead::Linear)?;
        let actor = init(&actor_spec, rng::mix(seed, &[0]));
        let critic = init(&critic_spec, rng::mix(seed, &[1]));
        let mut actor_adam = AdamState::new(actor.len(), config.actor_lr);
        let mut critic_adam = AdamState::new(critic.len(), config.critic_lr);
        actor_adam.optimizer = config.optimizer;
        critic_adam.optimizer = config.optimizer;
        Ok(Self {
            actor_spec,
            critic_spec,
            actor,
            critic,
            actor_adam,
            critic_adam,
            config,
            open: vec![Vec::new(); streams.max(1)],
            finished: Vec::new(),
            updates: 0,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.actor_spec.output_dim()
    }

    pub fn policy(&self, obs: &[f64]) -> Result<Vec<f64>> {
        forward(&self.actor, &self.actor_spec, obs)
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(forward(&self.critic, &self.critic_spec, obs)?[0])
    }

    /// Samples from the policy; returns `(action, log-probability, value)`.
    pub fn act_sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<(usize, f64, f64)> {
        let trace = forward_trace(&self.actor, &self.actor_spec, obs)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut action = trace.output.len() - 1;
        for (a, p) in trace.output.iter().enumerate() {
            acc += p;
            if u < acc {
                action = a;
                break;
            }
        }
        let logp = log_softmax(&trace.logits)[action];
        Ok((action, logp, self.value(obs)?))
    }

    pub fn act_greedy(&self, obs: &[f64]) -> Result<usize> {
        Ok(argmax(&self.policy(obs)?))
    }

    /// Appends a completed decision to the given stream.
    pub fn ppo_collect(&mut self, stream: usize, record: RolloutRecord) {
        self.open[stream].push(record);
    }

    /// Closes the stream's open trajectory. `bootstrap_value` is the value
    /// of the state following its last record.
    pub fn finish_stream(&mut self, stream: usize, bootstrap_value: f64) {
        let records = std::mem::take(&mut self.open[stream]);
        if !records.is_empty() {
            self.finished.push(Trajectory { records, bootstrap_value });
        }
    }

    /// Records collected since the last update, open or closed.
    pub fn rollout_len(&self) -> usize {
        self.open.iter().map(Vec::len).sum::<usize>() + self.finished.iter().map(|t| t.records.len()).sum::<usize>()
    }

    /// Runs the clipped-surrogate and critic updates on all closed
    /// trajectories and clears them. Returns mean `(policy_loss, value_loss)`
    /// over the processed minibatches, or `None` with nothing to learn from.
    pub fn ppo_update<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<(f64, f64)>> {
        let trajectories = std::mem::take(&mut self.finished);
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut old_logp = Vec::new();
        let mut advantages = Vec::new();
        let mut returns = Vec::new();
        for t in &trajectories {
            let (a, g) = compute_advantages(&t.records, t.bootstrap_value, self.config.discount, self.config.gae_lambda);
            advantages.extend(a);
            returns.extend(g);
            for r in &t.records {
                states.push(r.state.clone());
                actions.push(r.action);
                old_logp.push(r.logp);
            }
        }
        if states.is_empty() {
            return Ok(None);
        }
        normalize_advantages(&mut advantages);

        let n = states.len();
        let eta = self.config.clip_eta;
        let (mut policy_total, mut value_total, mut batches) = (0.0, 0.0, 0usize);
        for _ in 0..self.config.epochs {
            let order = index::sample(rng, n, n).into_vec();
            for mb in order.chunks(self.config.minibatch) {
                let b = mb.len() as f64;
                let mut g_actor = vec![0.0; self.actor.len()];
                let mut g_critic = vec![0.0; self.critic.len()];
                let (mut pl, mut vl) = (0.0, 0.0);
                for &i in mb {
                    let trace = forward_trace(&self.actor, &self.actor_spec, &states[i])?;
                    let logp_all = log_softmax(&trace.logits);
                    let ratio = (logp_all[actions[i]] - old_logp[i]).exp();
                    let a = advantages[i];
                    pl -= clipped_surrogate(ratio, a, eta);
                    // d/dz of -surrogate; zero when the clipped branch is the minimum.
                    let unclipped = ratio * a <= ratio.clamp(1.0 - eta, 1.0 + eta) * a;
                    let mut dz = vec![0.0; trace.logits.len()];
                    if unclipped {
                        let c = -ratio * a / b;
                        for (k, d) in dz.iter_mut().enumerate() {
                            let onehot = if k == actions[i] { 1.0 } else { 0.0 };
                            *d = c * (onehot - trace.output[k]);
                        }
                    }
                    if self.config.entropy_coef > 0.0 {
                        let p = softmax(&trace.logits);
                        let h: f64 = -p.iter().zip(&logp_all).map(|(p, l)| p * l).sum::<f64>();
                        for (k, d) in dz.iter_mut().enumerate() {
                            // gradient of -coef * H
                            *d += self.config.entropy_coef * p[k] * (logp_all[k] + h) / b;
                        }
                    }
                    accumulate_logit_grad(&self.actor, &self.actor_spec, &trace, &dz, &mut g_actor);

                    let vt = forward_trace(&self.critic, &self.critic_spec, &states[i])?;
                    let err = vt.output[0] - returns[i];
                    vl += err * err;
                    accumulate_logit_grad(&self.critic, &self.critic_spec, &vt, &[2.0 * err / b], &mut g_critic);
                }
                clip_grad_norm(&mut g_actor, self.config.grad_clip);
                clip_grad_norm(&mut g_critic, self.config.grad_clip.max(1.0) * 10.0);
                adam_step(&mut self.actor, &g_actor, &mut self.actor_adam)?;
                adam_step(&mut self.critic, &g_critic, &mut self.critic_adam)?;
                policy_total += pl / b;
                value_total += vl / b;
                batches += 1;
            }
        }
        self.updates += 1;
        Ok(Some((policy_total / batches as f64, value_total / batches as f64)))
    }
}
