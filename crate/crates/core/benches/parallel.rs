use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use inx_core::baselines::brute_force_optimal;
use inx_core::env::{Env, EnvConfig};
use inx_core::exec::Execution;
use inx_core::harness::{evaluate, Policy};
use inx_core::radiolink::RadioConfig;

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn env_config(n: usize, devices: usize, execution: Execution) -> EnvConfig {
    EnvConfig { num_subnetworks: n, devices_per_subnetwork: devices, execution, ..Default::default() }
}

fn env_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("env_step_n50_m4");
    for mode in MODES {
        let mut env = Env::new(env_config(50, 4, mode)).unwrap();
        env.reset(1).unwrap();
        g.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter(|| {
                if env.last_output().is_some_and(|o| o.done) {
                    env.reset(1).unwrap();
                }
                let a = env.allocation().clone();
                black_box(env.step(&a).unwrap());
            })
        });
    }
    g.finish();
}

fn brute_force(c: &mut Criterion) {
    let mut g = c.benchmark_group("brute_force_n8_k4");
    g.sample_size(10);
    let mut cfg = env_config(8, 1, Execution::Sequential);
    cfg.radio = RadioConfig { num_channels: 4, ..Default::default() };
    let mut env = Env::new(cfg).unwrap();
    env.reset(3).unwrap();
    let snap = env.snapshot();
    for mode in MODES {
        g.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| b.iter(|| black_box(brute_force_optimal(&snap, 4, mode).unwrap())));
    }
    g.finish();
}

fn multi_seed_eval(c: &mut Criterion) {
    let mut g = c.benchmark_group("greedy_eval_4_seeds");
    g.sample_size(10);
    let mut cfg = env_config(20, 1, Execution::Sequential);
    cfg.steps_per_episode = 50;
    for mode in MODES {
        g.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter(|| black_box(evaluate(&cfg, &Policy::Greedy, &[0, 1, 2, 3], 1, false, mode).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, env_step, brute_force, multi_seed_eval);
criterion_main!(benches);
