//! End-to-end acceptance checks, one test per criterion.
//!
//! Every test writes a single `PASS`/`FAIL` line straight to stdout (so it
//! shows without `--nocapture`) and then asserts. The learning criteria run
//! on a scaled configuration: N = 10, K = 4, 400 episodes, 3 seeds.

#![allow(clippy::needless_range_loop)]

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use inx_core::approximator::{backward, forward, init, Activation, MlpSpec, OutputHead, ParamVector};
use inx_core::baselines::{brute_force_optimal, build_graph, cgc_allocate, random_allocate, InterferenceGraph};
use inx_core::env::Env;
use inx_core::exec::{self, Execution};
use inx_core::federated::{aggregate, aggregate_round, broadcast, train, AggregatorState, Learner, TrainOutcome};
use inx_core::harness::{baseline_log, density_sweep, greedy_one_shot, ExperimentConfig, Method, Policy};
use inx_core::radiolink::{self, sinr, ChannelGainTensor, FadingState, RadioConfig, ShadowGenerator};
use inx_core::rng::{self, tag};
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const EPISODES: usize = 400;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("[criterion {id:>2}] {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- 1

#[test]
fn c01_formula_suite() {
    let t = Instant::now();
    let r = RadioConfig { noise_figure_db: 10.0, channel_bandwidth_hz: 10e6, ..Default::default() };
    let noise = radiolink::noise_power_dbm(&r);
    let noise_ok = (noise - (-94.0)).abs() <= 1e-12;
    let disp_ok = radiolink::dispersion(1.0) == 0.75;
    let gamma = 10.0;
    let fbl = radiolink::spectral_efficiency(gamma, 1_000_000_000, 1e-5).unwrap();
    let shannon = (1.0 + gamma).log2();
    let shannon_gap = (fbl - shannon).abs() / shannon;

    // Independent SINR: signal over noise plus co-channel powers, from plain nested vectors.
    let mut worst: f64 = 0.0;
    let mut r = rng::stream(2024, &[]);
    for _ in 0..100 {
        let (n, m, k) = (r.random_range(2..6), r.random_range(1..4), r.random_range(1..4));
        let mut plain = vec![vec![vec![vec![0.0; k]; m]; n]; n];
        let mut t = ChannelGainTensor::zeros(n, m, k);
        for (tx, per_tx) in plain.iter_mut().enumerate() {
            for (rx, per_rx) in per_tx.iter_mut().enumerate() {
                for (d, per_dev) in per_rx.iter_mut().enumerate() {
                    for (c, g) in per_dev.iter_mut().enumerate() {
                        *g = 10f64.powf(r.random_range(-12.0..-3.0));
                        t.set(tx, rx, d, c, *g);
                    }
                }
            }
        }
        let alloc: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let noise = 10f64.powf(r.random_range(-12.0..-9.0));
        for rx in 0..n {
            for d in 0..m {
                let c = alloc[rx];
                let mut interference = 0.0;
                for tx in 0..n {
                    if tx != rx && alloc[tx] == c {
                        interference += plain[tx][rx][d][c];
                    }
                }
                let want = plain[rx][rx][d][c] / (noise + interference);
                let got = sinr(&t, &alloc, rx, d, noise);
                worst = worst.max((got - want).abs() / want);
            }
        }
    }
    let elapsed = t.elapsed();
    let pass = noise_ok && disp_ok && shannon_gap < 1e-3 && worst <= 1e-12 && elapsed < Duration::from_secs(1);
    report(
        1,
        "formula suite",
        pass,
        &format!("noise {noise:.15} dBm, V(1) = {}, Shannon gap {shannon_gap:.2e}, SINR rel err {worst:.1e}, {}", radiolink::dispersion(1.0), secs(elapsed)),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn c02_gradient_check() {
    let t = Instant::now();
    let mut r = rng::stream(7, &[]);
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let depth = r.random_range(1..4);
        let mut sizes = vec![r.random_range(2..17)];
        for _ in 0..depth {
            sizes.push(r.random_range(2..33));
        }
        sizes.push(r.random_range(2..9));
        let act = if i % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let head = if i % 3 == 0 { OutputHead::Softmax } else { OutputHead::Linear };
        let spec = MlpSpec::new(sizes, act, head).unwrap();
        let mut p = init(&spec, i);
        p.0.iter_mut().for_each(|x| *x += r.random_range(-0.1..0.1));
        let x: Vec<f64> = (0..spec.input_dim()).map(|_| r.random_range(-2.0..2.0)).collect();
        let u: Vec<f64> = (0..spec.output_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
        let f = |q: &ParamVector| -> f64 { forward(q, &spec, &x).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum() };
        let g = backward(&p, &spec, &x, &u).unwrap();
        let h = 1e-5;
        for j in 0..p.len() {
            let (mut plus, mut minus) = (p.clone(), p.clone());
            plus.0[j] += h;
            minus.0[j] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            worst = worst.max((fd - g.0[j]).abs() / fd.abs().max(g.0[j].abs()).max(1e-6));
        }
    }
    let elapsed = t.elapsed();
    report(2, "gradient correctness", worst < 1e-4 && elapsed < Duration::from_secs(10), &format!("max rel err {worst:.2e} over 20 nets, {}", secs(elapsed)));
}

// ---------------------------------------------------------------- 3

#[test]
fn c03_fedavg_algebra() {
    let mut r = rng::stream(3, &[]);
    let clients: Vec<ParamVector> = (0..5).map(|_| ParamVector((0..257).map(|_| r.random_range(-3.0..3.0)).collect())).collect();
    let refs: Vec<&ParamVector> = clients.iter().collect();
    let w = vec![0.2; 5];

    let same = vec![&clients[0]; 5];
    let idempotent = aggregate(&same, &w).unwrap().0.iter().zip(&clients[0].0).all(|(a, b)| a.to_bits() == b.to_bits());

    let avg = aggregate(&refs, &w).unwrap();
    let mut mean_err: f64 = 0.0;
    for (j, a) in avg.0.iter().enumerate() {
        let want = clients.iter().map(|c| c.0[j]).sum::<f64>() / 5.0;
        mean_err = mean_err.max((a - want).abs() / want.abs().max(1.0));
    }

    let mut perm_err: f64 = 0.0;
    for rot in 1..5 {
        let p: Vec<&ParamVector> = (0..5).map(|i| refs[(i * 3 + rot) % 5]).collect();
        let b = aggregate(&p, &w).unwrap();
        for (x, y) in avg.0.iter().zip(&b.0) {
            perm_err = perm_err.max((x - y).abs() / x.abs().max(1.0));
        }
    }

    let mut learners: Vec<Learner> = (0..4)
        .map(|i| {
            let cfg = inx_core::agents::DdqnConfig { hidden: vec![8, 8], ..Default::default() };
            Learner::Ddqn(inx_core::agents::DdqnAgent::new(4, 4, cfg, inx_core::agents::BufferMode::Individual, i).unwrap())
        })
        .collect();
    let mut state = AggregatorState::new(4, 512);
    aggregate_round(&mut state, &learners).unwrap();
    broadcast(&state, &mut learners);
    let first: Vec<Vec<u64>> = learners[0].trainable().iter().map(|p| p.0.iter().map(|x| x.to_bits()).collect()).collect();
    let equal = learners.iter().all(|l| {
        let bits: Vec<Vec<u64>> = l.trainable().iter().map(|p| p.0.iter().map(|x| x.to_bits()).collect()).collect();
        bits == first
    });

    let eps = 4.0 * f64::EPSILON;
    report(
        3,
        "FedAvg algebra",
        idempotent && mean_err <= eps && perm_err <= eps && equal,
        &format!("idempotent {idempotent}, mean err {mean_err:.1e}, permutation err {perm_err:.1e}, broadcast bit-equal {equal}"),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn c04_oracle_ordering() {
    let t = Instant::now();
    let mut c = ExperimentConfig { execution: Execution::Sequential, ..Default::default() };
    c.env.num_subnetworks = 6;
    c.env.radio.num_channels = 2;
    let mut env = Env::new(c.env_config()).unwrap();
    let (mut opt, mut cgc, mut greedy, mut random) = (0.0, 0.0, 0.0, 0.0);
    let mut dominated = 0;
    for s in 0..100u64 {
        env.reset(rng::mix(s, &[tag::EVAL])).unwrap();
        let snap = env.snapshot();
        let (_, best) = brute_force_optimal(&snap, 2, Execution::Parallel).unwrap();
        let cg = snap.sum_rate(&cgc_allocate(&build_graph(&snap.pairwise_mw, 2).unwrap(), 2));
        if best >= cg {
            dominated += 1;
        }
        opt += best;
        cgc += cg;
        greedy += snap.sum_rate(&greedy_one_shot(&env));
        random += snap.sum_rate(&random_allocate(6, 2, rng::mix(s, &[tag::ALLOCATION, 1])));
    }
    let elapsed = t.elapsed();
    let pass = opt >= cgc && cgc >= greedy && greedy >= random && dominated == 100 && elapsed < Duration::from_secs(120);
    report(
        4,
        "oracle ordering",
        pass,
        &format!(
            "mean sum-rate (Mbit/s) optimal {:.2} >= cgc {:.2} >= greedy {:.2} >= random {:.2}; optimal >= cgc on {dominated}/100; {}",
            opt / 1e8,
            cgc / 1e8,
            greedy / 1e8,
            random / 1e8,
            secs(elapsed)
        ),
    );
}

// ---------------------------------------------------------------- 5

fn exhaustive_min(g: &InterferenceGraph, k: usize) -> f64 {
    let n = g.len();
    let mut colors = vec![0; n];
    let mut best = f64::INFINITY;
    for mut idx in 0..k.pow(n as u32) {
        for c in colors.iter_mut() {
            *c = idx % k;
            idx /= k;
        }
        best = best.min(g.monochromatic_weight(&colors));
    }
    best
}

#[test]
fn c05_cgc_quality() {
    let t = Instant::now();
    let mut good = 0;
    for seed in 0..100u64 {
        let mut r = rng::stream(seed, &[55]);
        // Interference powers spread over three decades, as path loss makes them.
        let w: Vec<Vec<f64>> = (0..8).map(|a| (0..8).map(|b| if a == b { 0.0 } else { 10f64.powf(r.random_range(-3.0..0.0)) }).collect()).collect();
        let g = build_graph(&w, 3).unwrap();
        let opt = exhaustive_min(&g, 3);
        let got = g.monochromatic_weight(&cgc_allocate(&g, 3));
        if got <= 1.1 * opt + 1e-12 {
            good += 1;
        }
    }
    let elapsed = t.elapsed();
    report(5, "CGC quality", good >= 90 && elapsed < Duration::from_secs(120), &format!("within 10% of optimum on {good}/100 graphs, {}", secs(elapsed)));
}

// ---------------------------------------------------------------- 6-9

/// Scaled experiment shared by the learning criteria.
fn scaled(mode: &str, n: usize, tau_agg: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        mode: mode.parse().unwrap(),
        episodes: EPISODES,
        tau_agg,
        execution: Execution::Sequential,
        ..Default::default()
    };
    c.env.num_subnetworks = n;
    c.env.radio.num_channels = 4;
    c.ddqn.hidden = vec![32, 32];
    c.ddqn.discount = 0.9;
    c.ddqn.train_every = 2;
    c.ppo.actor_hidden = vec![32, 32];
    c.ppo.critic_hidden = vec![32, 32];
    c.ppo.discount = 0.9;
    c.ppo.actor_lr = 1e-3;
    c.ppo.epochs = 10;
    c.ppo.rollout_steps = 1024;
    c.validate().unwrap();
    c
}

/// Trains every seed; seeds fan out over threads when cores allow.
fn train_seeds(c: &ExperimentConfig) -> Vec<TrainOutcome> {
    exec::map(Execution::Parallel, &SEEDS, |&seed| {
        let mut env = Env::new(c.env_config()).unwrap();
        train(&mut env, &c.train_config(seed)).unwrap()
    })
}

fn ddqn_512() -> &'static (Vec<TrainOutcome>, Duration) {
    static RUNS: OnceLock<(Vec<TrainOutcome>, Duration)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t = Instant::now();
        let runs = train_seeds(&scaled("f-maddqn", 10, 512));
        (runs, t.elapsed())
    })
}

fn baseline_final(method: Method, seed: u64) -> f64 {
    let c = scaled("f-maddqn", 10, 512);
    let eps = baseline_log(&c, method, seed, EPISODES - 50..EPISODES).unwrap();
    eps.iter().map(|e| e.mean_reward).sum::<f64>() / eps.len() as f64
}

#[test]
fn c06_scaled_convergence() {
    let t = Instant::now();
    let (runs, _) = ddqn_512();
    let learned = runs.iter().map(|r| r.log.final_mean(50)).sum::<f64>() / 3.0;
    let greedy = SEEDS.iter().map(|&s| baseline_final(Method::Greedy, s)).sum::<f64>() / 3.0;
    let random = SEEDS.iter().map(|&s| baseline_final(Method::Random, s)).sum::<f64>() / 3.0;
    let elapsed = t.elapsed();
    let vs_greedy = learned / greedy;
    let vs_random = learned / random;
    report(
        6,
        "scaled convergence",
        vs_greedy >= 0.9 && vs_random >= 1.3 && elapsed < Duration::from_secs(1800),
        &format!(
            "final-50 reward {learned:.3}; greedy {greedy:.3} ({:.1}% >= 90%), random {random:.3} ({:.1}% >= 130%); {}",
            100.0 * vs_greedy,
            100.0 * vs_random,
            secs(elapsed)
        ),
    );
}

/// Episodes until the 25-episode trailing mean first reaches 90% of the
/// final-50 mean.
fn episodes_to_90(rewards: &[f64]) -> usize {
    let target = 0.9 * rewards[rewards.len() - 50..].iter().sum::<f64>() / 50.0;
    (25..=rewards.len()).find(|&e| rewards[e - 25..e].iter().sum::<f64>() / 25.0 >= target).unwrap_or(rewards.len())
}

#[test]
fn c07_convergence_speed() {
    let (ddqn, _) = ddqn_512();
    let ppo = train_seeds(&scaled("f-mappo", 10, 512));
    let mut wins = 0;
    let mut detail = Vec::new();
    for (d, p) in ddqn.iter().zip(&ppo) {
        let (ed, ep) = (episodes_to_90(&d.log.mean_rewards()), episodes_to_90(&p.log.mean_rewards()));
        if ep as f64 <= 0.8 * ed as f64 {
            wins += 1;
        }
        detail.push(format!("{ep} vs {ed}"));
    }
    report(7, "convergence speed", wins >= 2, &format!("episodes to 90% (F-MAPPO vs F-MADDQN) per seed: {}; {wins}/3 within 0.8x", detail.join(", ")));
}

#[test]
fn c08_aggregation_interval() {
    let (slow, _) = ddqn_512();
    let fast = train_seeds(&scaled("f-maddqn", 10, 128));
    let mut lower = 0;
    let mut detail = Vec::new();
    for (s, f) in slow.iter().zip(&fast) {
        let (a, b) = (f.log.final_mean(50), s.log.final_mean(50));
        if a < b {
            lower += 1;
        }
        detail.push(format!("{a:.3} vs {b:.3}"));
    }
    report(8, "aggregation interval", lower >= 2, &format!("final-50 reward tau=128 vs tau=512 per seed: {}; lower in {lower}/3", detail.join(", ")));
}

#[test]
fn c09_density_robustness() {
    let mut c = scaled("f-maddqn", 20, 512);
    let mut env = Env::new(c.env_config()).unwrap();
    let outcome = train(&mut env, &c.train_config(0)).unwrap();
    let policy = Policy::from_learners(&outcome.learners, outcome.aggregator.as_ref()).unwrap();
    c.eval.seeds = vec![100, 101];
    c.eval.episodes = 4;
    c.execution = Execution::Parallel;
    let n_values = [10, 20, 30, 40, 50];
    let rows = density_sweep(&c, Some(&policy), &n_values).unwrap();
    let rates: Vec<f64> = n_values
        .iter()
        .map(|&n| rows.iter().find(|r| r.num_subnetworks == n && r.method == "f-maddqn").unwrap().mean_rate_bps)
        .collect();
    let inversions = rates.windows(2).filter(|w| w[1] > w[0]).count();
    let shown: Vec<String> = n_values.iter().zip(&rates).map(|(n, r)| format!("N={n}: {:.2} Mbit/s", r / 1e6)).collect();
    report(9, "density robustness", inversions <= 1, &format!("{}; {inversions} inversion(s)", shown.join(", ")));
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_channel_statistics() {
    let t = Instant::now();
    let decorr = 10.0;
    let g = ShadowGenerator::new([0.0, 0.0], [60.0, 60.0], 1.0, decorr);
    let mut r = rng::stream(10, &[]);
    let (mut sxy, mut sxx, mut syy, mut sx, mut sy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut count = 0usize;
    let mut field_seed = 0;
    while count < 100_000 {
        let f = g.sample(1.0, field_seed);
        field_seed += 1;
        for _ in 0..250 {
            let p = [r.random_range(0..=50) as f64, r.random_range(0..=60) as f64];
            let (p, q) = if r.random_bool(0.5) { (p, [p[0] + 10.0, p[1]]) } else { ([p[1], p[0]], [p[1], p[0] + 10.0]) };
            let (x, y) = (f.unit_value_at(p), f.unit_value_at(q));
            sxy += x * y;
            sxx += x * x;
            syy += y * y;
            sx += x;
            sy += y;
            count += 1;
        }
    }
    let n = count as f64;
    let cov = sxy / n - (sx / n) * (sy / n);
    let corr = cov / ((sxx / n - (sx / n).powi(2)) * (syy / n - (sy / n).powi(2))).sqrt();
    let want = (-1.0f64).exp();

    let mut fr = rng::stream(11, &[]);
    let mut fading = FadingState::stationary(100_000, RadioConfig::default().fading_doppler_hz, &mut fr);
    for _ in 0..50 {
        fading.step(0.005, &mut fr);
    }
    let power = fading.h.iter().map(|h| h.norm_sqr()).sum::<f64>() / fading.h.len() as f64;

    let elapsed = t.elapsed();
    let pass = (corr - want).abs() <= 0.1 && (power - 1.0).abs() <= 0.02 && elapsed < Duration::from_secs(30);
    report(
        10,
        "channel statistics",
        pass,
        &format!("shadowing corr at 10 m {corr:.4} (target {want:.4} +/- 0.1), mean |h|^2 {power:.4}, {count} samples each, {}", secs(elapsed)),
    );
}
