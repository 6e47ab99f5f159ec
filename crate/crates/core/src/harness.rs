//! Experiment configuration, runners and metric sinks.
//!
//! Every artifact written here carries the hash of the configuration that
//! produced it. Tables are CSV, logs are JSONL.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{argmax, DdqnConfig, PpoConfig};
use crate::approximator::{self, forward, MlpSpec, ParamVector};
use crate::baselines::{brute_force_optimal, build_graph, cgc_allocate, greedy_select, random_allocate};
use crate::env::{AllocationVector, Env, EnvConfig, Orf, StepOutput};
use crate::exec::{self, Execution};
use crate::federated::{self, AggregatorState, Algorithm, Learner, TrainConfig, TrainingLog, TrainingMode};
use crate::radiolink::{self, RadioConfig, Scenario};
use crate::rng::{self, tag};
use crate::{Error, Result};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "INX_RRM_OUT";

/// Percentiles reported in rate CDF tables.
pub const CDF_PERCENTILES: [f64; 23] =
    [1.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0, 55.0, 60.0, 65.0, 70.0, 75.0, 80.0, 85.0, 90.0, 95.0, 99.0, 99.9, 100.0];

/// A learned mode or a non-learning baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Learned(TrainingMode),
    Cgc,
    Greedy,
    Random,
}

impl Method {
    pub const BASELINES: [Method; 3] = [Method::Cgc, Method::Greedy, Method::Random];

    pub fn training_mode(self) -> Option<TrainingMode> {
        match self {
            Method::Learned(m) => Some(m),
            _ => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Learned(m) => write!(f, "{m}"),
            Method::Cgc => f.write_str("cgc"),
            Method::Greedy => f.write_str("greedy"),
            Method::Random => f.write_str("random"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "cgc" => Method::Cgc,
            "greedy" => Method::Greedy,
            "random" => Method::Random,
            other => Method::Learned(other.parse()?),
        })
    }
}

impl TryFrom<String> for Method {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Total evaluation episodes, spread evenly over `seeds`.
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// CGC recolours at every step instead of at switching instants.
    pub cgc_every_step: bool,
    /// Also write every per-device rate sample.
    pub raw_dump: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 50, seeds: vec![0, 1, 2, 3, 4], cgc_every_step: false, raw_dump: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClutterScenario {
    pub name: String,
    pub scenario: Scenario,
    pub clutter_size_m: f64,
    pub clutter_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub n_values: Vec<usize>,
    pub clutter: Vec<ClutterScenario>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let sc = |name: &str, scenario, size, density| ClutterScenario { name: name.into(), scenario, clutter_size_m: size, clutter_density: density };
        Self {
            n_values: vec![10, 20, 30, 40, 50],
            clutter: vec![
                sc("sl-sparse", Scenario::InfSl, 10.0, 0.2),
                sc("sl-dense", Scenario::InfSl, 2.0, 0.4),
                sc("dl-sparse", Scenario::InfDl, 10.0, 0.2),
                sc("dl-dense", Scenario::InfDl, 2.0, 0.6),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Method,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Overrides `env.observation.orf` when set.
    pub orf: Option<Orf>,
    pub tau_agg: u64,
    pub reward_scale: f64,
    pub log_wall_time: bool,
    pub execution: Execution,
    pub env: EnvConfig,
    pub ddqn: DdqnConfig,
    pub ppo: PpoConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: "f-maddqn".parse().expect("valid"),
            episodes: 2000,
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            orf: None,
            tau_agg: 512,
            reward_scale: 1.0,
            log_wall_time: false,
            execution: Execution::default(),
            env: EnvConfig::default(),
            ddqn: DdqnConfig::default(),
            ppo: PpoConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(config_err)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(config_err)?;
        c.validate()?;
        Ok(c)
    }

    /// Loads TOML or JSON, chosen by file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_toml_str(&text),
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.eval.seeds.is_empty() {
            return Err(Error::config("seeds and eval.seeds must not be empty"));
        }
        if self.eval.episodes == 0 {
            return Err(Error::config("eval.episodes must be positive"));
        }
        if self.sweep.n_values.contains(&0) {
            return Err(Error::config("sweep.n_values must be positive"));
        }
        self.env_config().validate()?;
        self.train_config(self.seeds[0]).validate()
    }

    /// SHA-256 over the canonical JSON form, hex encoded. Output paths and
    /// the execution mode do not affect results and are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.execution = Execution::Sequential;
        let json = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Output directory after applying the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => self.output_dir.clone(),
        }
    }

    pub fn env_config(&self) -> EnvConfig {
        let mut e = self.env.clone();
        if let Some(orf) = self.orf {
            e.observation.orf = orf;
        }
        e.execution = self.execution;
        e
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            mode: self.mode.training_mode().unwrap_or_else(|| "f-maddqn".parse().expect("valid")),
            episodes: self.episodes,
            tau_agg: self.tau_agg,
            seed,
            ddqn: self.ddqn.clone(),
            ppo: self.ppo.clone(),
            reward_scale: self.reward_scale,
            log_wall_time: self.log_wall_time,
            config_hash: self.hash(),
            execution: self.execution,
        }
    }

    /// Environment used to run `method`; CGC in every-step mode needs the
    /// switching gate disabled.
    pub fn env_config_for(&self, method: Method) -> EnvConfig {
        let mut e = self.env_config();
        if method == Method::Cgc && self.eval.cgc_every_step {
            e.switch_gating = false;
        }
        e
    }
}

/// A frozen acting network.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenNet {
    pub spec: MlpSpec,
    pub params: ParamVector,
}

impl FrozenNet {
    pub fn act(&self, obs: &[f64]) -> Result<usize> {
        Ok(argmax(&forward(&self.params, &self.spec, obs)?))
    }
}

/// How channels are chosen during evaluation.
#[derive(Debug, Clone)]
pub enum Policy {
    /// Agent `n` acts with network `n % len` (a single shared network after
    /// federated training).
    Learned(Vec<FrozenNet>),
    Cgc,
    Greedy,
    Random,
}

impl Policy {
    /// The acting networks of trained learners. With an aggregator that
    /// completed at least one round, the global model is used for everyone.
    pub fn from_learners(learners: &[Learner], aggregator: Option<&AggregatorState>) -> Result<Self> {
        let acting = |l: &Learner| -> Result<FrozenNet> {
            Ok(match l {
                Learner::Ddqn(a) => FrozenNet { spec: a.spec.clone(), params: a.online.clone() },
                Learner::Ppo(a) => FrozenNet { spec: a.actor_spec.clone(), params: a.actor.clone() },
            })
        };
        if let Some(agg) = aggregator.filter(|a| a.round > 0) {
            let spec = acting(&learners[0])?.spec;
            return Ok(Policy::Learned(vec![FrozenNet { spec, params: agg.global_params[0].clone() }]));
        }
        Ok(Policy::Learned(learners.iter().map(acting).collect::<Result<_>>()?))
    }

    pub fn baseline(method: Method) -> Result<Self> {
        match method {
            Method::Cgc => Ok(Policy::Cgc),
            Method::Greedy => Ok(Policy::Greedy),
            Method::Random => Ok(Policy::Random),
            Method::Learned(m) => Err(Error::config(format!("{m} needs a trained model"))),
        }
    }

    pub fn check_compatible(&self, env: &Env) -> Result<()> {
        if let Policy::Learned(nets) = self {
            if nets.is_empty() {
                return Err(Error::Mismatch("no networks in checkpoint".into()));
            }
            for n in nets {
                if n.spec.input_dim() != env.observation_dim() || n.spec.output_dim() != env.num_channels() {
                    return Err(Error::Mismatch(format!(
                        "network maps {} -> {} but the environment has observations of length {} and {} channels",
                        n.spec.input_dim(),
                        n.spec.output_dim(),
                        env.observation_dim(),
                        env.num_channels()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Requested allocation for the coming step. Subnetworks outside their
    /// switching instants keep their channel regardless.
    pub fn actions(&self, env: &Env, last: &StepOutput) -> Result<AllocationVector> {
        let n = env.num_subnetworks();
        let mut a = env.allocation().clone();
        match self {
            Policy::Random => {}
            Policy::Greedy => {
                for sn in (0..n).filter(|&sn| env.is_switching(sn)) {
                    a.0[sn] = greedy_select(&worst_device_sinr(&last.sinrs[sn]));
                }
            }
            Policy::Cgc => {
                if (0..n).any(|sn| env.is_switching(sn)) {
                    let g = build_graph(&env.pairwise_interference(), env.num_channels())?;
                    a = cgc_allocate(&g, env.num_channels());
                }
            }
            Policy::Learned(nets) => {
                for sn in (0..n).filter(|&sn| env.is_switching(sn)) {
                    a.0[sn] = nets[sn % nets.len()].act(&last.observations[sn])?;
                }
            }
        }
        Ok(a)
    }
}

/// Per-channel SINR of the subnetwork's worst device.
fn worst_device_sinr(per_device: &[Vec<f64>]) -> Vec<f64> {
    let k = per_device[0].len();
    (0..k).map(|c| per_device.iter().map(|d| d[c]).fold(f64::INFINITY, f64::min)).collect()
}

/// Per-episode outcome of running a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub seed: u64,
    pub episode: usize,
    pub mean_reward: f64,
    pub per_agent_reward: Vec<f64>,
    /// Time-averaged rate of every device, bit/s.
    pub device_mean_rate_bps: Vec<f64>,
}

/// One per-device rate sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSample {
    pub seed: u64,
    pub episode: usize,
    pub step: u64,
    pub subnetwork: usize,
    pub device: usize,
    pub rate_bps: f64,
    pub spectral_efficiency: f64,
}

/// Runs one episode from `reset(episode_seed)`. Step 0 (the random
/// initial allocation) is not scored.
pub fn run_episode(env: &mut Env, policy: &Policy, episode_seed: u64, mut on_step: impl FnMut(&StepOutput)) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    policy.check_compatible(env)?;
    let n = env.num_subnetworks();
    let mut out = env.reset(episode_seed)?;
    let m = out.rates[0].len();
    let mut reward = vec![0.0; n];
    let mut rate = vec![0.0; n * m];
    let mut steps = 0.0;
    loop {
        let a = policy.actions(env, &out)?;
        out = env.step(&a)?;
        steps += 1.0;
        for sn in 0..n {
            reward[sn] += out.rewards[sn];
            for d in 0..m {
                rate[sn * m + d] += out.rates[sn][d];
            }
        }
        on_step(&out);
        if out.done {
            break;
        }
    }
    reward.iter_mut().for_each(|r| *r /= steps);
    rate.iter_mut().for_each(|r| *r /= steps);
    Ok((reward.iter().sum::<f64>() / n as f64, reward, rate))
}

/// Result of evaluating one method.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evaluation {
    pub episodes: Vec<EpisodeStats>,
    pub samples: Vec<RateSample>,
}

impl Evaluation {
    pub fn mean_reward(&self) -> f64 {
        self.episodes.iter().map(|e| e.mean_reward).sum::<f64>() / self.episodes.len().max(1) as f64
    }

    /// Mean over all per-device rate samples, bit/s.
    pub fn mean_rate_bps(&self) -> f64 {
        self.samples.iter().map(|s| s.rate_bps).sum::<f64>() / self.samples.len().max(1) as f64
    }
}

/// Runs `policy` for `episodes` episodes per seed. Seeds run in parallel
/// under the parallel execution mode; results are ordered by (seed, episode).
pub fn evaluate(env_config: &EnvConfig, policy: &Policy, seeds: &[u64], episodes_per_seed: usize, keep_samples: bool, execution: Execution) -> Result<Evaluation> {
    let per_seed = exec::map(execution, seeds, |&seed| -> Result<Evaluation> {
        let mut cfg = env_config.clone();
        cfg.execution = Execution::Sequential;
        let mut env = Env::new(cfg)?;
        let mut ev = Evaluation::default();
        for episode in 0..episodes_per_seed {
            let mut samples = Vec::new();
            let (mean_reward, per_agent_reward, device_mean_rate_bps) =
                run_episode(&mut env, policy, rng::mix(seed, &[tag::EVAL, episode as u64]), |out| {
                    if keep_samples {
                        for (sn, dev) in out.rates.iter().enumerate() {
                            for (d, &r) in dev.iter().enumerate() {
                                samples.push(RateSample {
                                    seed,
                                    episode,
                                    step: out.step,
                                    subnetwork: sn,
                                    device: d,
                                    rate_bps: r,
                                    spectral_efficiency: out.spectral_efficiency[sn][d],
                                });
                            }
                        }
                    }
                })?;
            ev.samples.extend(samples);
            ev.episodes.push(EpisodeStats { seed, episode, mean_reward, per_agent_reward, device_mean_rate_bps });
        }
        Ok(ev)
    });
    let mut all = Evaluation::default();
    for ev in per_seed {
        let ev = ev?;
        all.episodes.extend(ev.episodes);
        all.samples.extend(ev.samples);
    }
    Ok(all)
}

/// Nearest-rank percentile of sorted data.
pub fn nearest_rank(sorted: &[f64], percentile: f64) -> f64 {
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub method: String,
    pub percentile: f64,
    pub rate_bps: f64,
    pub spectral_efficiency: f64,
    pub cdf: f64,
    pub config_hash: String,
}

pub fn rate_cdf(method: &str, samples: &[RateSample], config_hash: &str) -> Vec<CdfRow> {
    let mut bps: Vec<f64> = samples.iter().map(|s| s.rate_bps).collect();
    let mut se: Vec<f64> = samples.iter().map(|s| s.spectral_efficiency).collect();
    bps.sort_by(f64::total_cmp);
    se.sort_by(f64::total_cmp);
    if bps.is_empty() {
        return Vec::new();
    }
    CDF_PERCENTILES
        .iter()
        .map(|&p| CdfRow {
            method: method.to_string(),
            percentile: p,
            rate_bps: nearest_rank(&bps, p),
            spectral_efficiency: nearest_rank(&se, p),
            cdf: p / 100.0,
            config_hash: config_hash.to_string(),
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Row of the per-episode metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub num_subnetworks: usize,
    pub scenario: String,
    pub seed: u64,
    pub episode: usize,
    pub mean_reward: f64,
    pub mean_rate_bps: f64,
    pub mean_spectral_efficiency: f64,
    pub config_hash: String,
}

/// Append-only JSONL sink.
#[derive(Debug)]
pub struct MetricsSink {
    path: PathBuf,
    file: fs::File,
}

impl MetricsSink {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        use std::io::Write;
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }
}

/// Concatenates logs that share one configuration hash.
pub fn merge_logs(logs: &[TrainingLog]) -> Result<TrainingLog> {
    let mut hash: Option<&str> = None;
    let mut out = TrainingLog::default();
    for log in logs {
        for r in &log.records {
            match hash {
                None => hash = Some(&r.config_hash),
                Some(h) if h != r.config_hash => {
                    return Err(Error::Mismatch(format!("config hash {} differs from {h}", r.config_hash)));
                }
                _ => {}
            }
            out.records.push(r.clone());
        }
    }
    Ok(out)
}

/// Manifest stored next to checkpoint files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub mode: TrainingMode,
    pub config_hash: String,
    pub seed: u64,
    pub agents: usize,
    pub networks: Vec<String>,
    pub round: u64,
}

fn network_names(algorithm: Algorithm) -> Vec<String> {
    match algorithm {
        Algorithm::Maddqn => vec!["q".into()],
        Algorithm::Mappo => vec!["actor".into(), "critic".into()],
    }
}

fn learner_nets(l: &Learner) -> Vec<(&MlpSpec, &ParamVector)> {
    match l {
        Learner::Ddqn(a) => vec![(&a.spec, &a.online)],
        Learner::Ppo(a) => vec![(&a.actor_spec, &a.actor), (&a.critic_spec, &a.critic)],
    }
}

/// Writes `global_<net>.bin` for the current round and refreshes the manifest.
pub fn write_global_checkpoint(dir: &Path, manifest: &Manifest, specs: &[&MlpSpec], state: &AggregatorState) -> Result<()> {
    fs::create_dir_all(dir)?;
    for ((name, spec), params) in manifest.networks.iter().zip(specs).zip(&state.global_params) {
        approximator::write_checkpoint(&dir.join(format!("global_{name}.bin")), spec, params)?;
    }
    let m = Manifest { round: state.round, ..manifest.clone() };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

/// Writes every learner's networks as `agent<i>_<net>.bin`.
pub fn write_agent_checkpoints(dir: &Path, manifest: &Manifest, learners: &[Learner]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, l) in learners.iter().enumerate() {
        for (name, (spec, params)) in manifest.networks.iter().zip(learner_nets(l)) {
            approximator::write_checkpoint(&dir.join(format!("agent{i}_{name}.bin")), spec, params)?;
        }
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

/// Loads the acting policy from a checkpoint directory: the global model if
/// one was written, otherwise the per-agent networks.
pub fn load_policy(dir: &Path) -> Result<(Manifest, Policy)> {
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(dir.join("manifest.json")).map_err(|e| Error::Mismatch(format!("{}: {e}", dir.display())))?,
    )?;
    let acting = &manifest.networks[0];
    let global = dir.join(format!("global_{acting}.bin"));
    let nets = if manifest.round > 0 && global.exists() {
        let (spec, params) = approximator::read_checkpoint(&global)?;
        vec![FrozenNet { spec, params }]
    } else {
        (0..manifest.agents)
            .map(|i| approximator::read_checkpoint(&dir.join(format!("agent{i}_{acting}.bin"))).map(|(spec, params)| FrozenNet { spec, params }))
            .collect::<Result<Vec<_>>>()?
    };
    Ok((manifest, Policy::Learned(nets)))
}

/// Outcome of training one seed.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub seed: u64,
    pub log: TrainingLog,
    pub policy: Policy,
    pub checkpoint_dir: PathBuf,
}

/// Trains one seed, writing the JSONL log and checkpoints under
/// `<out>/seed<seed>/`.
pub fn train_seed(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<TrainArtifacts> {
    let mode = config.mode.training_mode().ok_or_else(|| Error::config(format!("`{}` is not a training mode", config.mode)))?;
    let mut tc = config.train_config(seed);
    tc.execution = config.execution;
    let dir = out.join(format!("seed{seed}"));
    fs::create_dir_all(&dir)?;
    let mut env = Env::new(config.env_config())?;
    let manifest = Manifest {
        mode,
        config_hash: tc.config_hash.clone(),
        seed,
        agents: 0,
        networks: network_names(mode.algorithm),
        round: 0,
    };
    let mut trainer = federated::Trainer::new(tc, env.num_subnetworks(), env.observation_dim(), env.num_channels())?;
    let manifest = Manifest { agents: trainer.learners().len(), ..manifest };
    let specs: Vec<MlpSpec> = learner_nets(trainer.learners()[0]).into_iter().map(|(s, _)| s.clone()).collect();
    let spec_refs: Vec<&MlpSpec> = specs.iter().collect();
    let mut log_sink = MetricsSink::create(&dir.join("train.jsonl"))?;
    fs::write(dir.join("train.jsonl"), "")?;
    let mut on_round = |state: &AggregatorState| write_global_checkpoint(&dir, &manifest, &spec_refs, state);
    for _ in 0..config.episodes {
        let rec = trainer.run_episode(&mut env, &mut on_round)?.clone();
        log_sink.write(&rec)?;
    }
    let aggregator = trainer.aggregator().cloned();
    let round = aggregator.as_ref().map_or(0, |a| a.round);
    let log = trainer.log.clone();
    let learners = trainer.into_learners();
    write_agent_checkpoints(&dir, &Manifest { round, ..manifest }, &learners)?;
    let policy = Policy::from_learners(&learners, aggregator.as_ref())?;
    Ok(TrainArtifacts { seed, log, policy, checkpoint_dir: dir })
}

/// Trains every configured seed.
pub fn run_train(config: &ExperimentConfig) -> Result<Vec<TrainArtifacts>> {
    let out = config.resolved_output_dir();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), config.to_toml_string()?)?;
    config.seeds.iter().map(|&s| train_seed(config, s, &out)).collect()
}

/// Per-episode rewards of a baseline on the training episode sequence of
/// `seed`, for comparison with training curves.
pub fn baseline_log(config: &ExperimentConfig, method: Method, seed: u64, episodes: std::ops::Range<usize>) -> Result<Vec<EpisodeStats>> {
    let policy = Policy::baseline(method)?;
    let mut env = Env::new(config.env_config_for(method))?;
    episodes
        .map(|episode| {
            let (mean_reward, per_agent_reward, device_mean_rate_bps) =
                run_episode(&mut env, &policy, rng::mix(seed, &[tag::EPISODE, episode as u64]), |_| {})?;
            Ok(EpisodeStats { seed, episode, mean_reward, per_agent_reward, device_mean_rate_bps })
        })
        .collect()
}

/// Runs the configured baseline over the training episodes of each seed
/// and its evaluation; writes `baseline_<method>.jsonl` and the CDF.
pub fn run_baseline(config: &ExperimentConfig) -> Result<Vec<EpisodeStats>> {
    let method = config.mode;
    if method.training_mode().is_some() {
        return Err(Error::config(format!("`{method}` is not a baseline; use cgc, greedy or random")));
    }
    let out = config.resolved_output_dir();
    let hash = config.hash();
    let mut sink = MetricsSink::create(&out.join(format!("baseline_{method}.jsonl")))?;
    let mut all = Vec::new();
    for &seed in &config.seeds {
        for ep in baseline_log(config, method, seed, 0..config.episodes)? {
            sink.write(&serde_json::json!({
                "episode": ep.episode,
                "seed": seed,
                "method": method.to_string(),
                "mean_reward": ep.mean_reward,
                "per_agent_reward": ep.per_agent_reward,
                "config_hash": hash,
            }))?;
            all.push(ep);
        }
    }
    run_eval(config, None)?;
    Ok(all)
}

fn episodes_per_seed(eval: &EvalConfig) -> usize {
    eval.episodes.div_ceil(eval.seeds.len())
}

/// Policy for `config.mode`, loading learned models from `checkpoint`.
pub fn resolve_policy(config: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Policy> {
    match (config.mode, checkpoint) {
        (Method::Learned(_), Some(dir)) => Ok(load_policy(dir)?.1),
        (Method::Learned(m), None) => Err(Error::config(format!("evaluating {m} needs a checkpoint directory"))),
        (baseline, _) => Policy::baseline(baseline),
    }
}

/// Evaluation report of one method.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub method: Method,
    pub cdf: Vec<CdfRow>,
    pub evaluation: Evaluation,
}

/// Frozen-policy rollouts; writes `cdf_<method>.csv`, the per-episode
/// metrics and optionally `rates_raw_<method>.csv`.
pub fn run_eval(config: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let policy = resolve_policy(config, checkpoint)?;
    eval_policy(config, config.mode, &policy)
}

pub fn eval_policy(config: &ExperimentConfig, method: Method, policy: &Policy) -> Result<EvalReport> {
    let out = config.resolved_output_dir();
    let hash = config.hash();
    let env_cfg = config.env_config_for(method);
    let ev = evaluate(&env_cfg, policy, &config.eval.seeds, episodes_per_seed(&config.eval), true, config.execution)?;
    let name = method.to_string();
    let cdf = rate_cdf(&name, &ev.samples, &hash);
    write_csv(&out.join(format!("cdf_{name}.csv")), &cdf)?;
    if config.eval.raw_dump {
        write_csv(&out.join(format!("rates_raw_{name}.csv")), &ev.samples)?;
    }
    let mut sink = MetricsSink::create(&out.join(format!("eval_{name}.jsonl")))?;
    let bw = env_cfg.radio.channel_bandwidth_hz;
    for e in &ev.episodes {
        let mean = e.device_mean_rate_bps.iter().sum::<f64>() / e.device_mean_rate_bps.len() as f64;
        sink.write(&MetricsRecord {
            method: name.clone(),
            num_subnetworks: env_cfg.num_subnetworks,
            scenario: format!("{:?}", env_cfg.radio.scenario),
            seed: e.seed,
            episode: e.episode,
            mean_reward: e.mean_reward,
            mean_rate_bps: mean,
            mean_spectral_efficiency: mean / bw,
            config_hash: hash.clone(),
        })?;
    }
    Ok(EvalReport { method, cdf, evaluation: ev })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub num_subnetworks: usize,
    pub method: String,
    pub mean_rate_bps: f64,
    pub mean_spectral_efficiency: f64,
    pub config_hash: String,
}

/// Methods compared in sweeps: the learned policy if given, then baselines.
fn sweep_methods(config: &ExperimentConfig, learned: Option<&Policy>) -> Vec<(Method, Policy)> {
    let mut v = Vec::new();
    if let (Some(p), Method::Learned(_)) = (learned, config.mode) {
        v.push((config.mode, p.clone()));
    }
    v.extend(Method::BASELINES.iter().map(|&m| (m, Policy::baseline(m).expect("baseline"))));
    v
}

/// Average per-device rate for every `N` and method.
pub fn density_sweep(config: &ExperimentConfig, learned: Option<&Policy>, n_values: &[usize]) -> Result<Vec<DensityRow>> {
    let hash = config.hash();
    let mut rows = Vec::new();
    for &n in n_values {
        for (method, policy) in sweep_methods(config, learned) {
            let mut env_cfg = config.env_config_for(method);
            env_cfg.num_subnetworks = n;
            let ev = evaluate(&env_cfg, &policy, &config.eval.seeds, episodes_per_seed(&config.eval), true, config.execution)?;
            let mean = ev.mean_rate_bps();
            rows.push(DensityRow {
                num_subnetworks: n,
                method: method.to_string(),
                mean_rate_bps: mean,
                mean_spectral_efficiency: mean / env_cfg.radio.channel_bandwidth_hz,
                config_hash: hash.clone(),
            });
        }
    }
    Ok(rows)
}

pub fn run_density_sweep(config: &ExperimentConfig, checkpoint: Option<&Path>, n_values: &[usize]) -> Result<Vec<DensityRow>> {
    let learned = match checkpoint {
        Some(dir) => Some(load_policy(dir)?.1),
        None => None,
    };
    let rows = density_sweep(config, learned.as_ref(), n_values)?;
    write_csv(&config.resolved_output_dir().join("density.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClutterRow {
    pub scenario: String,
    pub method: String,
    pub min_rate_bps: f64,
    pub avg_rate_bps: f64,
    pub max_rate_bps: f64,
    pub min_spectral_efficiency: f64,
    pub avg_spectral_efficiency: f64,
    pub max_spectral_efficiency: f64,
    pub config_hash: String,
}

/// Min / mean / max over devices and episodes of each device's
/// time-averaged rate, per scenario and method.
pub fn clutter_sweep(config: &ExperimentConfig, learned: Option<&Policy>, scenarios: &[ClutterScenario]) -> Result<Vec<ClutterRow>> {
    let hash = config.hash();
    let mut rows = Vec::new();
    for sc in scenarios {
        for (method, policy) in sweep_methods(config, learned) {
            let mut env_cfg = config.env_config_for(method);
            let base = &env_cfg.radio;
            env_cfg.radio = RadioConfig {
                scenario: sc.scenario,
                clutter_size_m: sc.clutter_size_m,
                clutter_density: sc.clutter_density,
                shadow_sigma_nlos_db: sc.scenario.nlos_shadow_sigma_db(),
                ..base.clone()
            };
            let ev = evaluate(&env_cfg, &policy, &config.eval.seeds, episodes_per_seed(&config.eval), false, config.execution)?;
            let rates: Vec<f64> = ev.episodes.iter().flat_map(|e| e.device_mean_rate_bps.iter().copied()).collect();
            let min = rates.iter().copied().fold(f64::INFINITY, f64::min);
            let max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let avg = rates.iter().sum::<f64>() / rates.len() as f64;
            let bw = env_cfg.radio.channel_bandwidth_hz;
            rows.push(ClutterRow {
                scenario: sc.name.clone(),
                method: method.to_string(),
                min_rate_bps: min,
                avg_rate_bps: avg,
                max_rate_bps: max,
                min_spectral_efficiency: min / bw,
                avg_spectral_efficiency: avg / bw,
                max_spectral_efficiency: max / bw,
                config_hash: hash.clone(),
            });
        }
    }
    Ok(rows)
}

pub fn run_clutter_sweep(config: &ExperimentConfig, checkpoint: Option<&Path>, scenarios: &[ClutterScenario]) -> Result<Vec<ClutterRow>> {
    let learned = match checkpoint {
        Some(dir) => Some(load_policy(dir)?.1),
        None => None,
    };
    let rows = clutter_sweep(config, learned.as_ref(), scenarios)?;
    write_csv(&config.resolved_output_dir().join("clutter.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Self-checks of closed-form quantities and allocator ordering on small
/// frozen snapshots.
pub fn oracle_check(config: &ExperimentConfig, snapshots: usize) -> Result<Vec<OracleCheck>> {
    let mut checks = Vec::new();
    let mut push = |name: &str, pass: bool, detail: String| checks.push(OracleCheck { name: name.into(), pass, detail });

    let r = RadioConfig { noise_figure_db: 10.0, channel_bandwidth_hz: 10e6, ..Default::default() };
    let noise = radiolink::noise_power_dbm(&r);
    push("noise_power_dbm", (noise + 94.0).abs() < 1e-12, format!("{noise:.15} dBm"));
    let v = radiolink::dispersion(1.0);
    push("dispersion(1)", v == 0.75, format!("{v}"));
    let gamma = 10.0;
    let fbl = radiolink::spectral_efficiency(gamma, 1_000_000_000, 1e-5)?;
    let shannon = (1.0 + gamma).log2();
    push("shannon_limit", (fbl - shannon).abs() / shannon < 1e-3, format!("{fbl} vs {shannon}"));

    let n = 6;
    let k = 2;
    let mut env_cfg = config.env_config();
    env_cfg.num_subnetworks = n;
    env_cfg.radio.num_channels = k;
    let mut env = Env::new(env_cfg)?;
    let (mut opt, mut cgc, mut greedy, mut random) = (0.0, 0.0, 0.0, 0.0);
    let mut dominated = true;
    for s in 0..snapshots as u64 {
        env.reset(rng::mix(s, &[tag::EVAL]))?;
        let snap = env.snapshot();
        let (_, best) = brute_force_optimal(&snap, k, config.execution)?;
        let c = snap.sum_rate(&cgc_allocate(&build_graph(&snap.pairwise_mw, k)?, k));
        let g = snap.sum_rate(&greedy_one_shot(&env));
        let rnd = snap.sum_rate(&random_allocate(n, k, rng::mix(s, &[tag::ALLOCATION, 1])));
        dominated &= best >= c && best >= g && best >= rnd;
        opt += best;
        cgc += c;
        greedy += g;
        random += rnd;
    }
    let m = snapshots.max(1) as f64;
    push("oracle_dominates", dominated, format!("{snapshots} snapshots"));
    push(
        "mean_ordering",
        opt >= cgc && cgc >= greedy && greedy >= random,
        format!("optimal {:.4e} cgc {:.4e} greedy {:.4e} random {:.4e} bit/s", opt / m, cgc / m, greedy / m, random / m),
    );
    Ok(checks)
}

/// Every subnetwork simultaneously picks the channel with the best measured
/// SINR for the current allocation.
pub fn greedy_one_shot(env: &Env) -> AllocationVector {
    let out = env.last_output().expect("environment was reset");
    AllocationVector(out.sinrs.iter().map(|dev| greedy_select(&worst_device_sinr(dev))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config(dir: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            episodes: 3,
            output_dir: dir.to_path_buf(),
            tau_agg: 100,
            execution: Execution::Sequential,
            ..Default::default()
        };
        c.env.num_subnetworks = 4;
        c.env.steps_per_episode = 50;
        c.ddqn.hidden = vec![8];
        c.ddqn.warmup = 32;
        c.ddqn.batch_size = 16;
        c.eval.episodes = 4;
        c.eval.seeds = vec![0, 1];
        c
    }

    #[test]
    fn method_names() {
        for s in ["cgc", "greedy", "random", "f-maddqn", "c-mappo", "d-maddqn"] {
            assert_eq!(s.parse::<Method>().unwrap().to_string(), s);
        }
        assert!("optimal".parse::<Method>().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("episodes = 3\nbogus_key = 1\n").unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("bogus_key"), "{err}");
        let err = ExperimentConfig::from_toml_str("[env]\nnum_subnetworkz = 3\n").unwrap_err();
        assert!(err.to_string().contains("num_subnetworkz"));
        let err = ExperimentConfig::from_json_str(r#"{"ddqn": {"gamma": 0.5}}"#).unwrap_err();
        assert!(err.to_string().contains("gamma"));
    }

    #[test]
    fn config_round_trips_and_hashes() {
        let c = ExperimentConfig::from_toml_str("mode = \"f-mappo\"\ntau_agg = 128\norf = \"median\"\n[env]\nnum_subnetworks = 7\n").unwrap();
        assert_eq!(c.mode.to_string(), "f-mappo");
        assert_eq!(c.env_config().observation.orf, Orf::Median);
        let again = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
        let mut d = c.clone();
        d.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(d.hash(), c.hash());
        d.tau_agg = 256;
        assert_ne!(d.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(ExperimentConfig::from_toml_str("tau_agg = 0\n").unwrap_err().is_config());
        assert!(ExperimentConfig::from_toml_str("[ddqn]\ndiscount = 1.5\n").unwrap_err().is_config());
        assert!(ExperimentConfig::from_toml_str("mode = \"q-learning\"\n").unwrap_err().is_config());
    }

    #[test]
    fn nearest_rank_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(nearest_rank(&xs, 25.0), 1.0);
        assert_eq!(nearest_rank(&xs, 26.0), 2.0);
        assert_eq!(nearest_rank(&xs, 100.0), 4.0);
        assert_eq!(nearest_rank(&xs, 0.1), 1.0);
    }

    #[test]
    fn cdf_matches_raw_dump() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = quick_config(dir.path());
        c.mode = Method::Random;
        let report = run_eval(&c, None).unwrap();
        let rows: Vec<CdfRow> = read_csv(&dir.path().join("cdf_random.csv")).unwrap();
        assert_eq!(rows, report.cdf);
        assert_eq!(rows.last().unwrap().cdf, 1.0);
        assert!(rows.windows(2).all(|w| w[0].rate_bps <= w[1].rate_bps && w[0].cdf < w[1].cdf));
        let raw: Vec<RateSample> = read_csv(&dir.path().join("rates_raw_random.csv")).unwrap();
        assert_eq!(raw.len(), 4 * 50 * 4);
        let mut sorted: Vec<f64> = raw.iter().map(|s| s.rate_bps).collect();
        sorted.sort_by(f64::total_cmp);
        for r in &rows {
            let idx = ((r.percentile / 100.0) * sorted.len() as f64).ceil() as usize - 1;
            assert_eq!(r.rate_bps, sorted[idx]);
        }
    }

    #[test]
    fn eval_is_reproducible_across_execution_modes() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = quick_config(dir.path());
        c.mode = Method::Greedy;
        let a = run_eval(&c, None).unwrap();
        c.execution = Execution::Parallel;
        let b = run_eval(&c, None).unwrap();
        assert_eq!(a.cdf, b.cdf);
        assert_eq!(a.evaluation, b.evaluation);
    }

    #[test]
    fn train_writes_artifacts_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let c = quick_config(dir.path());
        let arts = run_train(&c).unwrap();
        let seed_dir = &arts[0].checkpoint_dir;
        let log_text = fs::read_to_string(seed_dir.join("train.jsonl")).unwrap();
        assert_eq!(log_text, arts[0].log.to_jsonl().unwrap());
        assert!(log_text.contains(&c.hash()));
        assert!(seed_dir.join("global_q.bin").exists());
        let (manifest, policy) = load_policy(seed_dir).unwrap();
        assert_eq!(manifest.round, 150 / 100);
        assert!(matches!(&policy, Policy::Learned(n) if n.len() == 1));
        if let (Policy::Learned(a), Policy::Learned(b)) = (&policy, &arts[0].policy) {
            assert_eq!(a, b);
        }
        let report = run_eval(&c, Some(seed_dir)).unwrap();
        assert_eq!(report.cdf.len(), CDF_PERCENTILES.len());

        // same seed, same bytes
        let dir2 = tempfile::tempdir().unwrap();
        let again = run_train(&quick_config(dir2.path())).unwrap();
        assert_eq!(again[0].log.to_jsonl().unwrap(), log_text);
    }

    #[test]
    fn checkpoint_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let c = quick_config(dir.path());
        let arts = run_train(&c).unwrap();
        let mut other = c.clone();
        other.env.radio.num_channels = 3;
        let err = run_eval(&other, Some(&arts[0].checkpoint_dir)).unwrap_err();
        assert!(matches!(err, Error::Mismatch(_)), "{err}");
    }

    #[test]
    fn merge_refuses_mixed_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let c = quick_config(dir.path());
        let a = run_train(&c).unwrap().remove(0).log;
        assert_eq!(merge_logs(&[a.clone(), a.clone()]).unwrap().records.len(), 6);
        let mut b = a.clone();
        b.records[0].config_hash = "other".into();
        assert!(matches!(merge_logs(&[a, b]), Err(Error::Mismatch(_))));
    }

    #[test]
    fn sweeps_cover_every_cell() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = quick_config(dir.path());
        c.mode = Method::Cgc;
        c.eval.episodes = 2;
        let rows = run_density_sweep(&c, None, &[3, 6]).unwrap();
        assert_eq!(rows.len(), 2 * 3);
        for n in [3, 6] {
            for m in ["cgc", "greedy", "random"] {
                assert!(rows.iter().any(|r| r.num_subnetworks == n && r.method == m));
            }
        }
        let rows = run_clutter_sweep(&c, None, &c.sweep.clutter.clone()).unwrap();
        assert_eq!(rows.len(), c.sweep.clutter.len() * 3);
        for r in &rows {
            assert!(r.min_rate_bps <= r.avg_rate_bps && r.avg_rate_bps <= r.max_rate_bps);
        }
        assert!(dir.path().join("clutter.csv").exists());
    }

    #[test]
    fn oracle_check_passes() {
        let c = ExperimentConfig { execution: Execution::Sequential, ..Default::default() };
        let checks = oracle_check(&c, 100).unwrap();
        assert!(checks.iter().all(|c| c.pass), "{checks:?}");
    }

    #[test]
    fn output_dir_env_override() {
        let c = ExperimentConfig::default();
        // Only read here; other tests never set the variable.
        if std::env::var_os(OUTPUT_DIR_ENV).is_none() {
            assert_eq!(c.resolved_output_dir(), PathBuf::from("runs"));
        }
    }
}
