//! Multi-agent channel-selection environment.
//!
//! Each subnetwork is one agent. At every step the environment
//!
//! 1. applies the requested channel of each subnetwork whose switching
//!    instant is now (all others keep their channel),
//! 2. moves the robots and advances fading,
//! 3. evaluates SINR, finite-blocklength rates and rewards for the
//!    resulting allocation, and
//! 4. lets every device sense all channels, producing the observation
//!    used at the next decision.
//!
//! Channels are indexed from zero.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::exec::{self, Execution};
use crate::factory::{self, build_layout, spawn, Deployment, FactoryLayout, LayoutConfig, MobilityConfig};
use crate::radiolink::{
    self, complex_gaussian, dbm_to_mw, inverse_q, los_probability, noise_power_mw, pathloss_db, spectral_efficiency_with_q,
    ChannelGainTensor, RadioConfig, ShadowField, ShadowGenerator,
};
use crate::rng::{self, tag};
use crate::{Error, Result};

/// Channel chosen by every subnetwork.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationVector(pub Vec<usize>);

impl AllocationVector {
    pub fn validate(&self, num_channels: usize) -> Result<()> {
        match self.0.iter().position(|&c| c >= num_channels) {
            Some(n) => Err(Error::InvalidAction { subnetwork: n, channel: self.0[n], num_channels }),
            None => Ok(()),
        }
    }
}

impl std::ops::Deref for AllocationVector {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.0
    }
}

/// Observation reduction applied to the per-device measurements of a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orf {
    Full,
    Mean,
    Max,
    Median,
    Min,
}

impl Orf {
    pub fn reduce(self, xs: &[f64]) -> f64 {
        debug_assert!(!xs.is_empty());
        match self {
            Orf::Full => panic!("the full ORF keeps every measurement"),
            Orf::Mean => xs.iter().sum::<f64>() / xs.len() as f64,
            Orf::Max => xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Orf::Min => xs.iter().copied().fold(f64::INFINITY, f64::min),
            Orf::Median => {
                let mut v = xs.to_vec();
                v.sort_by(f64::total_cmp);
                let h = v.len() / 2;
                if v.len() % 2 == 1 {
                    v[h]
                } else {
                    0.5 * (v[h - 1] + v[h])
                }
            }
        }
    }
}

impl std::str::FromStr for Orf {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Orf::Full,
            "mean" => Orf::Mean,
            "max" => Orf::Max,
            "median" => Orf::Median,
            "min" => Orf::Min,
            _ => return Err(Error::config(format!("unknown ORF `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Sir,
    Sinr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationConfig {
    pub orf: Orf,
    pub measure: Measure,
    /// Measurements are reported in dB, clamped to this range.
    pub floor_db: f64,
    pub ceiling_db: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self { orf: Orf::Min, measure: Measure::Sir, floor_db: -30.0, ceiling_db: 60.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Minimum spectral efficiency in bit/s/Hz.
    pub r_min: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0, r_min: 11.0 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || (self.lambda1 == 0.0 && self.lambda2 == 0.0) {
            return Err(Error::config("reward weights must be non-negative and not both zero"));
        }
        Ok(())
    }
}

/// `lambda1 * sum(r) - lambda2 * sum over violating devices of (r_min - r)`,
/// with rates in bit/s/Hz.
pub fn reward(rates: &[f64], config: &RewardConfig) -> f64 {
    let total: f64 = rates.iter().sum();
    let shortfall: f64 = rates.iter().filter(|&&r| r < config.r_min).map(|&r| config.r_min - r).sum();
    config.lambda1 * total - config.lambda2 * shortfall
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchSchedule {
    pub next_switch_step: Vec<u64>,
    pub tau_max: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub radio: RadioConfig,
    pub layout: LayoutConfig,
    pub mobility: MobilityConfig,
    pub num_subnetworks: usize,
    pub devices_per_subnetwork: usize,
    pub dt_s: f64,
    pub steps_per_episode: u64,
    pub tau_max: u64,
    /// When false every step is a switching instant.
    pub switch_gating: bool,
    pub observation: ObservationConfig,
    pub reward: RewardConfig,
    pub layout_seed: u64,
    pub shadow_resolution_m: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            radio: RadioConfig::default(),
            layout: LayoutConfig::default(),
            mobility: MobilityConfig::default(),
            num_subnetworks: 20,
            devices_per_subnetwork: 1,
            dt_s: 0.005,
            steps_per_episode: 200,
            tau_max: 10,
            switch_gating: true,
            observation: ObservationConfig::default(),
            reward: RewardConfig::default(),
            layout_seed: 0,
            shadow_resolution_m: 1.0,
            execution: Execution::Sequential,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.radio.validate()?;
        self.reward.validate()?;
        if self.num_subnetworks == 0 || self.devices_per_subnetwork == 0 {
            return Err(Error::config("need at least one subnetwork and one device"));
        }
        if !(self.dt_s > 0.0) || self.steps_per_episode == 0 || self.tau_max == 0 {
            return Err(Error::config("dt_s, steps_per_episode and tau_max must be positive"));
        }
        if !(self.shadow_resolution_m > 0.0) {
            return Err(Error::config("shadow_resolution_m must be positive"));
        }
        if self.observation.floor_db >= self.observation.ceiling_db {
            return Err(Error::config("observation floor must be below the ceiling"));
        }
        Ok(())
    }

    /// Length of one agent's observation vector.
    pub fn observation_dim(&self) -> usize {
        match self.observation.orf {
            Orf::Full => self.radio.num_channels * self.devices_per_subnetwork,
            _ => self.radio.num_channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub step: u64,
    pub observations: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// Achieved rate per device in bit/s.
    pub rates: Vec<Vec<f64>>,
    /// Achieved spectral efficiency per device in bit/s/Hz.
    pub spectral_efficiency: Vec<Vec<f64>>,
    /// Measured SINR (linear) per device and channel, `[n][m][k]`.
    pub sinrs: Vec<Vec<Vec<f64>>>,
    pub allocation: AllocationVector,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LosState {
    los: bool,
    drawn_at_m: f64,
}

/// Link state of one receiving device: one entry per transmitting AP
/// (`los`, `large_scale_mw`) or per AP and channel (`fading`, `gain`).
#[derive(Debug, Clone)]
struct RxLinks {
    los: Vec<LosState>,
    large_scale_mw: Vec<f64>,
    fading: Vec<Complex64>,
}

/// Gains and noise frozen at one instant; enough to evaluate any allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub gains: ChannelGainTensor,
    pub noise_mw: f64,
    pub channel_bandwidth_hz: f64,
    pub blocklength: u32,
    pub q_inv: f64,
    /// Large-scale interference power `pairwise[victim][aggressor]` in mW.
    pub pairwise_mw: Vec<Vec<f64>>,
    pub allocation: AllocationVector,
}

impl Snapshot {
    /// Sum of device rates in bit/s under `allocation`.
    pub fn sum_rate(&self, allocation: &[usize]) -> f64 {
        sum_rate(&self.gains, allocation, self.noise_mw, self.channel_bandwidth_hz, self.blocklength, self.q_inv)
    }
}

/// Sum over all devices of the finite-blocklength rate (bit/s).
pub fn sum_rate(gains: &ChannelGainTensor, allocation: &[usize], noise_mw: f64, bandwidth_hz: f64, blocklength: u32, q_inv: f64) -> f64 {
    let mut total = 0.0;
    for n in 0..gains.num_subnetworks {
        for m in 0..gains.devices_per_subnetwork {
            let g = radiolink::sinr(gains, allocation, n, m, noise_mw);
            total += bandwidth_hz * spectral_efficiency_with_q(g, blocklength, q_inv);
        }
    }
    total
}

#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    layout: FactoryLayout,
    shadow_gen: ShadowGenerator,
    noise_mw: f64,
    q_inv: f64,
    rho: f64,
    // episode state
    seed: u64,
    step: u64,
    deployment: Deployment,
    shadow: ShadowField,
    links: Vec<RxLinks>,
    gains: ChannelGainTensor,
    allocation: AllocationVector,
    schedule: SwitchSchedule,
    last: Option<StepOutput>,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(config.layout_seed, &config.layout)?;
        let margin = config.radio.shadow_decorr_m;
        let shadow_gen = ShadowGenerator::new(
            [-margin, -margin],
            [layout.width_m + 2.0 * margin, layout.height_m + 2.0 * margin],
            config.shadow_resolution_m,
            config.radio.shadow_decorr_m,
        );
        let noise_mw = noise_power_mw(&config.radio);
        let q_inv = inverse_q(config.radio.decode_error_prob);
        let rho = radiolink::ar1_coefficient(config.radio.fading_doppler_hz, config.dt_s);
        let n = config.num_subnetworks;
        let deployment = spawn(&layout, n, config.devices_per_subnetwork, &config.mobility, 0)?;
        let shadow = shadow_gen.sample(config.radio.shadow_sigma_db, 0);
        let gains = ChannelGainTensor::zeros(n, config.devices_per_subnetwork, config.radio.num_channels);
        Ok(Self {
            layout,
            shadow_gen,
            noise_mw,
            q_inv,
            rho,
            seed: 0,
            step: 0,
            deployment,
            shadow,
            links: Vec::new(),
            gains,
            allocation: AllocationVector(vec![0; n]),
            schedule: SwitchSchedule { next_switch_step: vec![0; n], tau_max: config.tau_max },
            last: None,
            config,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn layout(&self) -> &FactoryLayout {
        &self.layout
    }

    pub fn deployment(&self) -> &Deployment {
        &self.deployment
    }

    pub fn gains(&self) -> &ChannelGainTensor {
        &self.gains
    }

    pub fn allocation(&self) -> &AllocationVector {
        &self.allocation
    }

    pub fn schedule(&self) -> &SwitchSchedule {
        &self.schedule
    }

    pub fn noise_mw(&self) -> f64 {
        self.noise_mw
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn num_subnetworks(&self) -> usize {
        self.config.num_subnetworks
    }

    pub fn num_channels(&self) -> usize {
        self.config.radio.num_channels
    }

    pub fn observation_dim(&self) -> usize {
        self.config.observation_dim()
    }

    pub fn last_output(&self) -> Option<&StepOutput> {
        self.last.as_ref()
    }

    /// Whether subnetwork `n` may change channel at the current step.
    pub fn is_switching(&self, n: usize) -> bool {
        !self.config.switch_gating || self.schedule.next_switch_step[n] == self.step
    }

    /// Starts a new episode: fresh deployment, shadowing, fading and a
    /// uniformly random initial allocation.
    pub fn reset(&mut self, seed: u64) -> Result<StepOutput> {
        let n = self.config.num_subnetworks;
        let k = self.config.radio.num_channels;
        self.seed = seed;
        self.step = 0;
        self.deployment = spawn(&self.layout, n, self.config.devices_per_subnetwork, &self.config.mobility, seed)?;
        self.shadow = self.shadow_gen.sample(self.config.radio.shadow_sigma_db, seed);
        self.allocation = crate::baselines::random_allocate(n, k, rng::mix(seed, &[tag::ALLOCATION]));
        let mut r = rng::stream(seed, &[tag::SCHEDULE]);
        self.schedule = SwitchSchedule {
            next_switch_step: (0..n).map(|_| r.random_range(0..self.config.tau_max)).collect(),
            tau_max: self.config.tau_max,
        };
        self.links = self.init_links();
        self.refresh_gains(0);
        let out = self.evaluate(false);
        self.last = Some(out.clone());
        Ok(out)
    }

    fn init_links(&self) -> Vec<RxLinks> {
        let n = self.config.num_subnetworks;
        let k = self.config.radio.num_channels;
        let devices = n * self.config.devices_per_subnetwork;
        let seed = self.seed;
        exec::map_range(self.config.execution, 0..devices, |j| {
            let mut r = rng::stream(seed, &[tag::FADING_INIT, j as u64]);
            RxLinks {
                los: vec![LosState { los: true, drawn_at_m: f64::NAN }; n],
                large_scale_mw: vec![0.0; n],
                fading: (0..n * k).map(|_| complex_gaussian(&mut r)).collect(),
            }
        })
    }

    /// Recomputes large-scale gains at the current positions and, for
    /// `t > 0`, advances fading by one step. Each receiving device owns an
    /// independent counter-keyed stream, so the loop parallelises without
    /// changing results.
    fn refresh_gains(&mut self, t: u64) {
        let cfg = &self.config;
        let n = cfg.num_subnetworks;
        let m_per = cfg.devices_per_subnetwork;
        let k = cfg.radio.num_channels;
        let aps = self.deployment.ap_positions();
        let robots = &self.deployment.robots;
        let shadow = &self.shadow;
        let radio = &cfg.radio;
        let (seed, rho) = (self.seed, self.rho);
        let dh = radio.ap_height_m - radio.device_height_m;
        let innovation = (1.0 - rho * rho).max(0.0).sqrt();

        exec::for_each_mut(cfg.execution, &mut self.links, |j, rx| {
            let dev = robots[j / m_per].device_position(j % m_per);
            let mut r = rng::stream(seed, &[tag::FADING_STEP, t, j as u64]);
            for i in 0..n {
                let d2 = factory::distance(aps[i], dev);
                let state = &mut rx.los[i];
                if state.drawn_at_m.is_nan() || (d2 - state.drawn_at_m).abs() > 1.0 {
                    let u = rng::unit(seed, &[tag::LOS, t, j as u64, i as u64]);
                    *state = LosState { los: u < los_probability(d2, radio), drawn_at_m: d2 };
                }
                let d3 = (d2 * d2 + dh * dh).sqrt().max(1.0);
                let pl = pathloss_db(d3, radio, state.los).expect("distance clamped to the model floor");
                let sigma = if state.los { radio.shadow_sigma_db } else { radio.shadow_sigma_nlos_db };
                let sh = shadow.link_db(aps[i], dev, sigma);
                rx.large_scale_mw[i] = dbm_to_mw(radio.tx_power_dbm - pl - sh);
                if t > 0 {
                    for h in &mut rx.fading[i * k..(i + 1) * k] {
                        *h = *h * rho + complex_gaussian(&mut r) * innovation;
                    }
                }
            }
        });
        for (j, rx) in self.links.iter().enumerate() {
            let block = self.gains.device_block_mut(j);
            for i in 0..n {
                for c in 0..k {
                    block[i * k + c] = rx.large_scale_mw[i] * rx.fading[i * k + c].norm_sqr();
                }
            }
        }
    }

    /// Measured per-channel SIR or SINR (linear) of every device, `[n][m][k]`.
    fn measurements(&self, with_noise: bool) -> Vec<Vec<Vec<f64>>> {
        let cfg = &self.config;
        let (n, m_per, k) = (cfg.num_subnetworks, cfg.devices_per_subnetwork, cfg.radio.num_channels);
        let noise = if with_noise { self.noise_mw } else { 0.0 };
        (0..n)
            .map(|sn| {
                (0..m_per)
                    .map(|m| {
                        let block = self.gains.device_block(sn, m);
                        let mut interference = vec![noise; k];
                        for (i, &c) in self.allocation.iter().enumerate() {
                            if i != sn {
                                interference[c] += block[i * k + c];
                            }
                        }
                        (0..k).map(|c| block[sn * k + c] / interference[c]).collect()
                    })
                    .collect()
            })
            .collect()
    }

    fn observation_from(&self, measured: &[Vec<f64>]) -> Vec<f64> {
        let o = &self.config.observation;
        let k = self.config.radio.num_channels;
        let to_db = |x: f64| (10.0 * x.log10()).clamp(o.floor_db, o.ceiling_db);
        match o.orf {
            Orf::Full => (0..k).flat_map(|c| measured.iter().map(move |dev| to_db(dev[c]))).collect(),
            orf => (0..k)
                .map(|c| {
                    let col: Vec<f64> = measured.iter().map(|dev| to_db(dev[c])).collect();
                    orf.reduce(&col)
                })
                .collect(),
        }
    }

    fn evaluate(&self, done: bool) -> StepOutput {
        let cfg = &self.config;
        let sinrs = self.measurements(true);
        let obs_source = match cfg.observation.measure {
            Measure::Sir => self.measurements(false),
            Measure::Sinr => sinrs.clone(),
        };
        let bw = cfg.radio.channel_bandwidth_hz;
        let mut rates = Vec::with_capacity(cfg.num_subnetworks);
        let mut se_all = Vec::with_capacity(cfg.num_subnetworks);
        let mut rewards = Vec::with_capacity(cfg.num_subnetworks);
        for (sn, dev) in sinrs.iter().enumerate() {
            let c = self.allocation[sn];
            let se: Vec<f64> = dev
                .iter()
                .map(|g| spectral_efficiency_with_q(g[c], cfg.radio.blocklength, self.q_inv))
                .collect();
            rewards.push(reward(&se, &cfg.reward));
            rates.push(se.iter().map(|s| s * bw).collect());
            se_all.push(se);
        }
        StepOutput {
            step: self.step,
            observations: obs_source.iter().map(|m| self.observation_from(m)).collect(),
            rewards,
            rates,
            spectral_efficiency: se_all,
            sinrs,
            allocation: self.allocation.clone(),
            done,
        }
    }

    /// Observation of subnetwork `n` from the most recent measurements.
    pub fn observe(&self, n: usize) -> Vec<f64> {
        match &self.last {
            Some(out) => out.observations[n].clone(),
            None => vec![0.0; self.observation_dim()],
        }
    }

    /// Applies `actions` (gated), advances time by one step and evaluates.
    pub fn step(&mut self, actions: &AllocationVector) -> Result<StepOutput> {
        let n = self.config.num_subnetworks;
        if actions.len() != n {
            return Err(Error::Shape { expected: n, got: actions.len() });
        }
        actions.validate(self.config.radio.num_channels)?;
        let t = self.step;
        let mut r = rng::stream(self.seed, &[tag::SCHEDULE, t + 1]);
        for sn in 0..n {
            if self.is_switching(sn) {
                self.allocation.0[sn] = actions[sn];
                if self.config.switch_gating {
                    self.schedule.next_switch_step[sn] = t + r.random_range(1..=self.config.tau_max);
                }
            }
        }
        factory::step_mobility_in_place(&mut self.deployment, &self.layout, self.config.dt_s);
        self.refresh_gains(t + 1);
        self.step = t + 1;
        let out = self.evaluate(self.step >= self.config.steps_per_episode);
        self.last = Some(out.clone());
        Ok(out)
    }

    /// Large-scale (fading-free) interference power: entry `[victim][aggressor]`
    /// is the mean received power of AP `aggressor` over the victim's devices.
    pub fn pairwise_interference(&self) -> Vec<Vec<f64>> {
        let n = self.config.num_subnetworks;
        let m_per = self.config.devices_per_subnetwork;
        (0..n)
            .map(|v| {
                (0..n)
                    .map(|a| {
                        if a == v {
                            0.0
                        } else {
                            (0..m_per).map(|m| self.links[v * m_per + m].large_scale_mw[a]).sum::<f64>() / m_per as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            gains: self.gains.clone(),
            noise_mw: self.noise_mw,
            channel_bandwidth_hz: self.config.radio.channel_bandwidth_hz,
            blocklength: self.config.radio.blocklength,
            q_inv: self.q_inv,
            pairwise_mw: self.pairwise_interference(),
            allocation: self.allocation.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(n: usize, k: usize) -> EnvConfig {
        EnvConfig {
            num_subnetworks: n,
            radio: RadioConfig { num_channels: k, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn reward_examples() {
        let c = RewardConfig { lambda1: 1.0, lambda2: 2.0, r_min: 11.0 };
        assert_eq!(reward(&[12.0], &c), 12.0);
        assert_eq!(reward(&[9.0], &c), 5.0);
        assert_eq!(reward(&[11.0, 12.5], &c), 23.5);
    }

    #[test]
    fn orf_examples() {
        assert_eq!(Orf::Min.reduce(&[3.0, 7.0]), 3.0);
        assert_eq!(Orf::Max.reduce(&[3.0, 7.0]), 7.0);
        assert_eq!(Orf::Mean.reduce(&[3.0, 7.0]), 5.0);
        assert_eq!(Orf::Median.reduce(&[3.0, 9.0, 7.0]), 7.0);
        assert_eq!(Orf::Median.reduce(&[3.0, 7.0]), 5.0);
        assert_eq!(Orf::Mean.reduce(&[4.2]), 4.2);
    }

    #[test]
    fn reset_is_deterministic_and_shaped() {
        let mut a = Env::new(small_config(8, 4)).unwrap();
        let mut b = Env::new(small_config(8, 4)).unwrap();
        let oa = a.reset(17).unwrap();
        let ob = b.reset(17).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(oa.observations[0].len(), 4);
        assert!(!oa.done);

        let full = EnvConfig {
            devices_per_subnetwork: 3,
            observation: ObservationConfig { orf: Orf::Full, ..Default::default() },
            ..small_config(5, 4)
        };
        let mut e = Env::new(full).unwrap();
        assert_eq!(e.reset(1).unwrap().observations[2].len(), 12);
    }

    #[test]
    fn mean_orf_equals_full_for_single_device() {
        let cfg = |orf| EnvConfig { observation: ObservationConfig { orf, ..Default::default() }, ..small_config(6, 3) };
        let mut a = Env::new(cfg(Orf::Mean)).unwrap();
        let mut b = Env::new(cfg(Orf::Full)).unwrap();
        assert_eq!(a.reset(3).unwrap().observations, b.reset(3).unwrap().observations);
    }

    #[test]
    fn episode_terminates_after_t_steps() {
        let mut cfg = small_config(4, 2);
        cfg.steps_per_episode = 15;
        let mut e = Env::new(cfg).unwrap();
        let first = e.reset(2).unwrap();
        let mut out = first.clone();
        for t in 0..15 {
            assert!(!out.done);
            out = e.step(&first.allocation).unwrap();
            assert_eq!(out.step, t + 1);
        }
        assert!(out.done);
    }

    #[test]
    fn invalid_channel_rejected() {
        let mut e = Env::new(small_config(3, 2)).unwrap();
        e.reset(0).unwrap();
        let err = e.step(&AllocationVector(vec![0, 2, 1])).unwrap_err();
        assert!(matches!(err, Error::InvalidAction { subnetwork: 1, channel: 2, .. }));
        assert!(e.step(&AllocationVector(vec![0, 1])).is_err());
    }

    #[test]
    fn gated_subnetworks_keep_their_channel() {
        let mut e = Env::new(small_config(10, 4)).unwrap();
        e.reset(5).unwrap();
        for _ in 0..100 {
            let before = e.allocation().clone();
            let switching: Vec<bool> = (0..10).map(|n| e.is_switching(n)).collect();
            let wanted = AllocationVector(before.iter().map(|&c| (c + 1) % 4).collect());
            let next = e.step(&wanted).unwrap();
            for n in 0..10 {
                let expect = if switching[n] { wanted[n] } else { before[n] };
                assert_eq!(next.allocation[n], expect);
            }
        }
    }

    #[test]
    fn switching_gaps_within_bounds() {
        let mut e = Env::new(small_config(6, 4)).unwrap();
        e.reset(8).unwrap();
        let mut last: Vec<Option<u64>> = vec![None; 6];
        for _ in 0..200 {
            let t = e.step_index();
            for n in 0..6 {
                if e.is_switching(n) {
                    if let Some(prev) = last[n] {
                        let gap = t - prev;
                        assert!((1..=10).contains(&gap), "{gap}");
                    }
                    last[n] = Some(t);
                }
            }
            let a = e.allocation().clone();
            e.step(&a).unwrap();
        }
        assert!(last.iter().all(|l| l.is_some()));
    }

    #[test]
    fn distinct_channels_have_no_interference() {
        let mut e = Env::new(small_config(4, 4)).unwrap();
        e.reset(4).unwrap();
        let alloc = AllocationVector(vec![0, 1, 2, 3]);
        let mut out = e.step(&alloc).unwrap();
        // Wait until every subnetwork has switched.
        for _ in 0..12 {
            out = e.step(&alloc).unwrap();
        }
        assert_eq!(out.allocation, alloc);
        for n in 0..4 {
            let g = e.gains().get(n, n, 0, n) / e.noise_mw();
            let measured = out.sinrs[n][0][n];
            assert!(((measured - g) / g).abs() < 1e-12);
        }
    }

    /// Literal SIR: signal over the sum of co-channel powers, term by term.
    #[test]
    fn observation_matches_scalar_oracle() {
        let mut e = Env::new(EnvConfig {
            observation: ObservationConfig { floor_db: -300.0, ceiling_db: 300.0, ..Default::default() },
            ..small_config(2, 2)
        })
        .unwrap();
        let out = e.reset(6).unwrap();
        let g = e.gains();
        let alloc = &out.allocation;
        for n in 0..2 {
            let other = 1 - n;
            for k in 0..2 {
                let signal = g.get(n, n, 0, k);
                let interference = if alloc[other] == k { g.get(other, n, 0, k) } else { 0.0 };
                let want = (10.0 * (signal / interference).log10()).clamp(-300.0, 300.0);
                let got = out.observations[n][k];
                if want.is_finite() && want.abs() < 300.0 {
                    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
                } else {
                    assert_eq!(got, 300.0);
                }
            }
        }
    }

    /// Across the two split allocations every (subnetwork, channel) pair is
    /// interference-free once; across the two co-channel ones it is
    /// interfered once. Rates are monotone in SINR, so splitting wins.
    #[test]
    fn split_beats_cochannel_for_two_subnetworks() {
        let mut e = Env::new(small_config(2, 2)).unwrap();
        for seed in 0..20 {
            e.reset(seed).unwrap();
            let s = e.snapshot();
            let co = s.sum_rate(&[0, 0]) + s.sum_rate(&[1, 1]);
            let split = s.sum_rate(&[0, 1]) + s.sum_rate(&[1, 0]);
            assert!(split > co, "seed {seed}: {split} <= {co}");
        }
    }

    #[test]
    fn step_rates_equal_objective() {
        let mut e = Env::new(EnvConfig { devices_per_subnetwork: 2, ..small_config(5, 3) }).unwrap();
        e.reset(9).unwrap();
        for _ in 0..5 {
            let a = e.allocation().clone();
            let out = e.step(&a).unwrap();
            let s = e.snapshot();
            let total: f64 = out.rates.iter().flatten().sum();
            // Independent per-device evaluation of the objective.
            let mut want = 0.0;
            for n in 0..5 {
                for m in 0..2 {
                    let g = &s.gains;
                    let k = out.allocation[n];
                    let mut i_sum = 0.0;
                    for i in 0..5 {
                        if i != n && out.allocation[i] == k {
                            i_sum += g.get(i, n, m, k);
                        }
                    }
                    let gamma = g.get(n, n, m, k) / (i_sum + s.noise_mw);
                    want += radiolink::achievable_rate(gamma, &RadioConfig { num_channels: 3, ..Default::default() }).unwrap();
                }
            }
            assert!(((total - want) / want).abs() < 1e-12);
            assert!(out.rates.iter().flatten().all(|&r| r >= 0.0));
        }
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let mut seq = Env::new(EnvConfig { execution: Execution::Sequential, ..small_config(12, 4) }).unwrap();
        let mut par = Env::new(EnvConfig { execution: Execution::Parallel, ..small_config(12, 4) }).unwrap();
        let a = seq.reset(21).unwrap();
        assert_eq!(a, par.reset(21).unwrap());
        for _ in 0..20 {
            let alloc = seq.allocation().clone();
            assert_eq!(seq.step(&alloc).unwrap(), par.step(&alloc).unwrap());
        }
        assert!(seq.gains().is_valid());
    }

    #[test]
    fn pairwise_is_nonnegative_with_zero_diagonal() {
        let mut e = Env::new(small_config(6, 2)).unwrap();
        e.reset(1).unwrap();
        let p = e.pairwise_interference();
        for (v, row) in p.iter().enumerate() {
            assert_eq!(row[v], 0.0);
            assert!(row.iter().all(|x| *x >= 0.0 && x.is_finite()));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn reward_monotone_in_each_rate(
                rates in proptest::collection::vec(0.0f64..20.0, 1..5),
                idx in 0usize..5,
                bump in 0.0f64..5.0,
                l1 in 0.0f64..3.0,
                l2 in 0.0f64..3.0,
            ) {
                let cfg = RewardConfig { lambda1: l1, lambda2: l2, r_min: 11.0 };
                let i = idx % rates.len();
                let mut up = rates.clone();
                up[i] += bump;
                prop_assert!(reward(&up, &cfg) >= reward(&rates, &cfg) - 1e-12);
            }

            #[test]
            fn channels_change_only_at_switching_instants(seed in 0u64..1000, pick in 0usize..4) {
                let mut env = Env::new(EnvConfig { steps_per_episode: 30, ..small_config(5, 4) }).unwrap();
                env.reset(seed).unwrap();
                for t in 0..30 {
                    let before = env.allocation().clone();
                    let switching: Vec<bool> = (0..5).map(|n| env.is_switching(n)).collect();
                    let actions = AllocationVector((0..5).map(|n| (n + t + pick) % 4).collect());
                    let out = env.step(&actions).unwrap();
                    for n in 0..5 {
                        if switching[n] {
                            prop_assert_eq!(out.allocation[n], actions[n]);
                        } else {
                            prop_assert_eq!(out.allocation[n], before[n]);
                        }
                    }
                }
            }
        }
    }
}
