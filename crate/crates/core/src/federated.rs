//! Training orchestration for federated, centralized and distributed
//! multi-agent learning.
//!
//! Agents decide only at their switching instants. A decision's transition
//! closes at the agent's next switching instant (or at episode end) and
//! carries the mean per-step reward observed in between.
//!
//! * distributed: one learner per agent, no parameter exchange;
//! * centralized: a single learner with a shared replay buffer (DDQN) or a
//!   pooled rollout (PPO) serving every agent;
//! * federated: one learner per agent, weights averaged every `tau_agg`
//!   environment steps and broadcast back.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agents::{BufferMode, DdqnAgent, DdqnConfig, PpoAgent, PpoConfig, RolloutRecord, Transition};
use crate::approximator::ParamVector;
use crate::env::{AllocationVector, Env};
use crate::exec::{self, Execution};
use crate::rng::{self, tag, StreamRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Federated,
    Centralized,
    Distributed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Maddqn,
    Mappo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TrainingMode {
    pub scheme: Scheme,
    pub algorithm: Algorithm,
}

impl TrainingMode {
    pub const fn new(scheme: Scheme, algorithm: Algorithm) -> Self {
        Self { scheme, algorithm }
    }
}

impl std::fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self.scheme {
            Scheme::Federated => "f",
            Scheme::Centralized => "c",
            Scheme::Distributed => "d",
        };
        let a = match self.algorithm {
            Algorithm::Maddqn => "maddqn",
            Algorithm::Mappo => "mappo",
        };
        write!(f, "{s}-{a}")
    }
}

impl std::str::FromStr for TrainingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (scheme, algorithm) = s
            .to_ascii_lowercase()
            .split_once('-')
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .ok_or_else(|| Error::config(format!("unknown training mode `{s}`")))?;
        let scheme = match scheme.as_str() {
            "f" => Scheme::Federated,
            "c" => Scheme::Centralized,
            "d" => Scheme::Distributed,
            _ => return Err(Error::config(format!("unknown training mode `{s}`"))),
        };
        let algorithm = match algorithm.as_str() {
            "maddqn" => Algorithm::Maddqn,
            "mappo" => Algorithm::Mappo,
            _ => return Err(Error::config(format!("unknown training mode `{s}`"))),
        };
        Ok(Self { scheme, algorithm })
    }
}

impl TryFrom<String> for TrainingMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TrainingMode> for String {
    fn from(m: TrainingMode) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainingMode,
    pub episodes: usize,
    /// Environment steps between federated rounds.
    pub tau_agg: u64,
    pub seed: u64,
    pub ddqn: DdqnConfig,
    pub ppo: PpoConfig,
    /// Multiplies transition rewards before they reach the learners.
    pub reward_scale: f64,
    /// Record episode wall time in the log (breaks byte-identical logs).
    pub log_wall_time: bool,
    #[serde(skip)]
    pub config_hash: String,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainingMode::new(Scheme::Federated, Algorithm::Maddqn),
            episodes: 2000,
            tau_agg: 512,
            seed: 0,
            ddqn: DdqnConfig::default(),
            ppo: PpoConfig::default(),
            reward_scale: 1.0,
            log_wall_time: false,
            config_hash: String::new(),
            execution: Execution::Sequential,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_agg == 0 {
            return Err(Error::config("tau_agg must be at least 1"));
        }
        if !(self.reward_scale > 0.0) {
            return Err(Error::config("reward_scale must be positive"));
        }
        self.ddqn.validate()?;
        self.ppo.validate()
    }
}

/// Global model and round bookkeeping of the federated server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorState {
    /// One vector per trainable network (DDQN: online; PPO: actor, critic).
    pub global_params: Vec<ParamVector>,
    pub agg_interval_steps: u64,
    pub weights: Vec<f64>,
    pub round: u64,
}

impl AggregatorState {
    pub fn new(num_clients: usize, agg_interval_steps: u64) -> Self {
        Self {
            global_params: Vec::new(),
            agg_interval_steps,
            weights: vec![1.0 / num_clients as f64; num_clients],
            round: 0,
        }
    }
}

/// Weighted elementwise mean of client parameter vectors.
pub fn aggregate(clients: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let first = clients.first().ok_or_else(|| Error::domain("no clients to aggregate"))?;
    if weights.len() != clients.len() {
        return Err(Error::Shape { expected: clients.len(), got: weights.len() });
    }
    if let Some(c) = clients.iter().find(|c| c.len() != first.len()) {
        return Err(Error::Shape { expected: first.len(), got: c.len() });
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 || weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::domain(format!("aggregation weights must be positive and sum to 1 (got {sum})")));
    }
    // Identical clients must come back unchanged, bit for bit.
    if clients.iter().all(|c| c.0 == first.0) {
        return Ok((*first).clone());
    }
    let mut out = vec![0.0; first.len()];
    for (c, w) in clients.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(&c.0) {
            *o += w * x;
        }
    }
    Ok(ParamVector(out))
}

/// A DDQN or PPO learner.
#[derive(Debug, Clone)]
pub enum Learner {
    Ddqn(DdqnAgent),
    Ppo(PpoAgent),
}

impl Learner {
    pub fn trainable(&self) -> Vec<&ParamVector> {
        match self {
            Learner::Ddqn(a) => vec![&a.online],
            Learner::Ppo(a) => vec![&a.actor, &a.critic],
        }
    }

    /// Replaces the trainable networks. DDQN targets are reset as well;
    /// optimiser moments stay local.
    pub fn load(&mut self, params: &[ParamVector]) {
        match self {
            Learner::Ddqn(a) => {
                a.online = params[0].clone();
                a.target = params[0].clone();
            }
            Learner::Ppo(a) => {
                a.actor = params[0].clone();
                a.critic = params[1].clone();
            }
        }
    }

    /// Greedy action of the frozen policy.
    pub fn act_greedy(&self, obs: &[f64]) -> Result<usize> {
        match self {
            Learner::Ddqn(a) => a.act_greedy(obs),
            Learner::Ppo(a) => a.act_greedy(obs),
        }
    }
}

/// Averages every client's trainable networks into `state` and increments
/// the round counter.
pub fn aggregate_round(state: &mut AggregatorState, learners: &[Learner]) -> Result<()> {
    aggregate_clients(state, &learners.iter().collect::<Vec<_>>())
}

fn aggregate_clients(state: &mut AggregatorState, learners: &[&Learner]) -> Result<()> {
    let per_client: Vec<Vec<&ParamVector>> = learners.iter().map(|l| l.trainable()).collect();
    let nets = per_client.first().map_or(0, Vec::len);
    state.global_params = (0..nets)
        .map(|j| {
            let clients: Vec<&ParamVector> = per_client.iter().map(|c| c[j]).collect();
            aggregate(&clients, &state.weights)
        })
        .collect::<Result<_>>()?;
    state.round += 1;
    Ok(())
}

/// Sends the global model to every learner.
pub fn broadcast(state: &AggregatorState, learners: &mut [Learner]) {
    for l in learners {
        l.load(&state.global_params);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub mode: TrainingMode,
    pub tau_agg: u64,
    pub mean_reward: f64,
    pub per_agent_reward: Vec<f64>,
    pub aggregations_so_far: u64,
    pub wall_ms: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpisodeRecord>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn mean_rewards(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_reward).collect()
    }

    /// Mean of the last `k` episode rewards.
    pub fn final_mean(&self, k: usize) -> f64 {
        let r = self.mean_rewards();
        let tail = &r[r.len().saturating_sub(k)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
struct Pending {
    state: Vec<f64>,
    action: usize,
    reward_sum: f64,
    steps: u32,
    logp: f64,
    value: f64,
}

#[derive(Debug, Clone)]
struct Slot {
    learner: Learner,
    rng: StreamRng,
}

/// Multi-agent trainer; call [`Trainer::run_episode`] once per episode.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    num_agents: usize,
    slots: Vec<Slot>,
    act_rngs: Vec<StreamRng>,
    aggregator: Option<AggregatorState>,
    global_step: u64,
    episode: usize,
    pub log: TrainingLog,
}

impl Trainer {
    pub fn new(config: TrainConfig, num_agents: usize, obs_dim: usize, num_actions: usize) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let learners = match config.mode.scheme {
            Scheme::Centralized => 1,
            _ => num_agents,
        };
        let mode = if learners == 1 && config.mode.scheme == Scheme::Centralized { BufferMode::Shared } else { BufferMode::Individual };
        let slots = (0..learners)
            .map(|l| {
                let init_seed = rng::mix(seed, &[tag::INIT, l as u64]);
                let learner = match config.mode.algorithm {
                    Algorithm::Maddqn => Learner::Ddqn(DdqnAgent::new(obs_dim, num_actions, config.ddqn.clone(), mode, init_seed)?),
                    Algorithm::Mappo => {
                        let streams = if config.mode.scheme == Scheme::Centralized { num_agents } else { 1 };
                        Learner::Ppo(PpoAgent::new(obs_dim, num_actions, config.ppo.clone(), streams, init_seed)?)
                    }
                };
                Ok(Slot { learner, rng: rng::stream(seed, &[tag::LEARN, l as u64]) })
            })
            .collect::<Result<Vec<_>>>()?;
        let aggregator = (config.mode.scheme == Scheme::Federated).then(|| AggregatorState::new(learners, config.tau_agg));
        Ok(Self {
            act_rngs: (0..num_agents).map(|n| rng::stream(seed, &[tag::ACT, n as u64])).collect(),
            num_agents,
            slots,
            aggregator,
            global_step: 0,
            episode: 0,
            log: TrainingLog::default(),
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn learners(&self) -> Vec<&Learner> {
        self.slots.iter().map(|s| &s.learner).collect()
    }

    pub fn into_learners(self) -> Vec<Learner> {
        self.slots.into_iter().map(|s| s.learner).collect()
    }

    pub fn aggregator(&self) -> Option<&AggregatorState> {
        self.aggregator.as_ref()
    }

    pub fn aggregations(&self) -> u64 {
        self.aggregator.as_ref().map_or(0, |a| a.round)
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    fn learner_of(&self, agent: usize) -> (usize, usize) {
        match self.config.mode.scheme {
            Scheme::Centralized => (0, agent),
            _ => (agent, 0),
        }
    }

    fn decide(&mut self, agent: usize, obs: Vec<f64>) -> Result<Pending> {
        let (l, _) = self.learner_of(agent);
        let r = &mut self.act_rngs[agent];
        let (action, logp, value) = match &self.slots[l].learner {
            Learner::Ddqn(a) => (a.act_epsilon_greedy(&obs, r)?, 0.0, 0.0),
            Learner::Ppo(a) => a.act_sample(&obs, r)?,
        };
        Ok(Pending { state: obs, action, reward_sum: 0.0, steps: 0, logp, value })
    }

    fn close(&mut self, agent: usize, p: Pending, next_state: &[f64], done: bool) {
        let (l, stream) = self.learner_of(agent);
        let reward = self.config.reward_scale * p.reward_sum / p.steps.max(1) as f64;
        match &mut self.slots[l].learner {
            Learner::Ddqn(a) => a.buffer.push(Transition { state: p.state, action: p.action, reward, next_state: next_state.to_vec(), done }),
            Learner::Ppo(a) => {
                a.ppo_collect(stream, RolloutRecord { state: p.state, action: p.action, logp: p.logp, reward, value: p.value, done });
                if done {
                    a.finish_stream(stream, 0.0);
                }
            }
        }
    }

    fn learn(&mut self, pending: &[Option<Pending>]) -> Result<()> {
        let step = self.global_step;
        match self.config.mode.algorithm {
            Algorithm::Maddqn => {
                if step.is_multiple_of(self.config.ddqn.train_every) {
                    let mut errors = Vec::new();
                    let errs = std::sync::Mutex::new(&mut errors);
                    exec::for_each_mut(self.config.execution, &mut self.slots, |_, slot| {
                        if let Learner::Ddqn(a) = &mut slot.learner {
                            if let Err(e) = a.train_step(&mut slot.rng) {
                                errs.lock().expect("poisoned").push(e);
                            }
                        }
                    });
                    if let Some(e) = errors.into_iter().next() {
                        return Err(e);
                    }
                }
            }
            Algorithm::Mappo => {
                if step.is_multiple_of(self.config.ppo.rollout_steps) {
                    for agent in 0..self.num_agents {
                        let (l, stream) = self.learner_of(agent);
                        let boot = pending[agent].as_ref().map_or(0.0, |p| p.value);
                        if let Learner::Ppo(a) = &mut self.slots[l].learner {
                            a.finish_stream(stream, boot);
                        }
                    }
                    let mut errors = Vec::new();
                    let errs = std::sync::Mutex::new(&mut errors);
                    exec::for_each_mut(self.config.execution, &mut self.slots, |_, slot| {
                        if let Learner::Ppo(a) = &mut slot.learner {
                            if let Err(e) = a.ppo_update(&mut slot.rng) {
                                errs.lock().expect("poisoned").push(e);
                            }
                        }
                    });
                    if let Some(e) = errors.into_iter().next() {
                        return Err(e);
                    }
                }
            }
        }
        Ok(())
    }

    fn maybe_aggregate(&mut self, on_round: &mut dyn FnMut(&AggregatorState) -> Result<()>) -> Result<()> {
        let step = self.global_step;
        if let Some(agg) = &mut self.aggregator {
            if step.is_multiple_of(agg.agg_interval_steps) {
                let clients: Vec<&Learner> = self.slots.iter().map(|s| &s.learner).collect();
                aggregate_clients(agg, &clients)?;
                for s in &mut self.slots {
                    s.learner.load(&agg.global_params);
                }
                on_round(agg)?;
            }
        }
        Ok(())
    }

    /// Runs one training episode and appends its log record.
    pub fn run_episode(&mut self, env: &mut Env, on_round: &mut dyn FnMut(&AggregatorState) -> Result<()>) -> Result<&EpisodeRecord> {
        let n = self.num_agents;
        if env.num_subnetworks() != n {
            return Err(Error::Shape { expected: n, got: env.num_subnetworks() });
        }
        let started = Instant::now();
        let episode = self.episode;
        if let Algorithm::Maddqn = self.config.mode.algorithm {
            let eps = self.config.ddqn.epsilon_schedule().value(episode, self.config.episodes);
            for s in &mut self.slots {
                if let Learner::Ddqn(a) = &mut s.learner {
                    a.epsilon = eps;
                }
            }
        }
        let mut out = env.reset(rng::mix(self.config.seed, &[tag::EPISODE, episode as u64]))?;
        let mut actions: AllocationVector = out.allocation.clone();
        let mut pending: Vec<Option<Pending>> = vec![None; n];
        for agent in 0..n {
            if env.is_switching(agent) {
                let p = self.decide(agent, out.observations[agent].clone())?;
                actions.0[agent] = p.action;
                pending[agent] = Some(p);
            }
        }
        let mut totals = vec![0.0; n];
        let mut steps = 0u64;
        loop {
            out = env.step(&actions)?;
            self.global_step += 1;
            steps += 1;
            for agent in 0..n {
                totals[agent] += out.rewards[agent];
                if let Some(p) = &mut pending[agent] {
                    p.reward_sum += out.rewards[agent];
                    p.steps += 1;
                }
            }
            for agent in 0..n {
                if out.done || env.is_switching(agent) {
                    if let Some(p) = pending[agent].take() {
                        self.close(agent, p, &out.observations[agent], out.done);
                    }
                    if !out.done {
                        let p = self.decide(agent, out.observations[agent].clone())?;
                        actions.0[agent] = p.action;
                        pending[agent] = Some(p);
                    }
                }
            }
            self.learn(&pending)?;
            self.maybe_aggregate(on_round)?;
            if out.done {
                break;
            }
        }
        let per_agent_reward: Vec<f64> = totals.iter().map(|t| t / steps as f64).collect();
        let record = EpisodeRecord {
            episode,
            mode: self.config.mode,
            tau_agg: self.config.tau_agg,
            mean_reward: per_agent_reward.iter().sum::<f64>() / n as f64,
            per_agent_reward,
            aggregations_so_far: self.aggregations(),
            wall_ms: if self.config.log_wall_time { started.elapsed().as_millis() as u64 } else { 0 },
            config_hash: self.config.config_hash.clone(),
        };
        self.episode += 1;
        self.log.records.push(record);
        Ok(self.log.records.last().expect("just pushed"))
    }
}

/// Output of a complete training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainingLog,
    pub learners: Vec<Learner>,
    pub aggregator: Option<AggregatorState>,
}

/// Trains for `config.episodes` episodes on `env`.
pub fn train(env: &mut Env, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(env, config, &mut |_| Ok(()))
}

/// As [`train`], invoking `on_round` after every federated round.
pub fn train_with(env: &mut Env, config: &TrainConfig, on_round: &mut dyn FnMut(&AggregatorState) -> Result<()>) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone(), env.num_subnetworks(), env.observation_dim(), env.num_channels())?;
    for _ in 0..config.episodes {
        t.run_episode(env, on_round)?;
    }
    let aggregator = t.aggregator.clone();
    let log = std::mem::take(&mut t.log);
    Ok(TrainOutcome { log, learners: t.into_learners(), aggregator })
}
