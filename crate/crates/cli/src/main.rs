use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use inx_core::env::Orf;
use inx_core::exec::Execution;
use inx_core::harness::{self, ExperimentConfig, Method};
use inx_core::{Error, Result};

/// Channel allocation experiments for mobile in-factory subnetworks.
///
/// Settings come from the defaults, then `--config`, then flags.
/// `INX_RRM_OUT` overrides the output directory.
#[derive(Debug, Parser)]
#[command(name = "inx-rrm", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML or JSON experiment file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// f-maddqn, f-mappo, c-maddqn, c-mappo, d-maddqn, d-mappo, cgc, greedy or random.
    #[arg(long, global = true)]
    mode: Option<Method>,
    /// Aggregation interval in environment steps.
    #[arg(long, global = true)]
    tau_agg: Option<u64>,
    /// Observation reduction: full, mean, max, median or min.
    #[arg(long, global = true)]
    orf: Option<Orf>,
    /// Number of subnetworks.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Seed; repeat for several.
    #[arg(long, global = true)]
    seed: Vec<u64>,
    /// Training episodes.
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run on the current thread only.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a learned mode and write logs and checkpoints.
    Train,
    /// Roll out a frozen policy and write the rate CDF.
    Eval {
        /// Checkpoint directory of a trained seed (learned modes only).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Average per-device rate against the number of subnetworks.
    SweepDensity {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma separated; defaults to `sweep.n_values`.
        #[arg(long, value_delimiter = ',')]
        n_values: Vec<usize>,
    },
    /// Min, mean and max per-device rate for each clutter scenario.
    SweepClutter {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a non-learning baseline on the training episodes.
    Baseline,
    /// Check closed-form values and allocator ordering.
    OracleCheck {
        #[arg(long, default_value_t = 100)]
        snapshots: usize,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut c = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = common.mode {
        c.mode = m;
    }
    if let Some(t) = common.tau_agg {
        c.tau_agg = t;
    }
    if common.orf.is_some() {
        c.orf = common.orf;
    }
    if let Some(n) = common.n {
        c.env.num_subnetworks = n;
    }
    if !common.seed.is_empty() {
        c.seeds = common.seed.clone();
    }
    if let Some(e) = common.episodes {
        c.episodes = e;
    }
    if let Some(out) = &common.out {
        c.output_dir = out.clone();
    }
    if common.sequential {
        c.execution = Execution::Sequential;
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load(&cli.common)?;
    let out = config.resolved_output_dir();
    match cli.command {
        Command::Train => {
            if config.mode.training_mode().is_none() {
                return Err(Error::config(format!("`{}` is a baseline; use the baseline command", config.mode)));
            }
            for a in harness::run_train(&config)? {
                println!("seed {} final mean reward {:.4} -> {}", a.seed, a.log.final_mean(50), a.checkpoint_dir.display());
            }
        }
        Command::Eval { checkpoint } => {
            let report = harness::run_eval(&config, checkpoint.as_deref())?;
            println!("{} mean reward {:.4}", report.method, report.evaluation.mean_reward());
            println!("percentile,rate_bps,bps_per_hz");
            for r in &report.cdf {
                println!("{},{:.6e},{:.4}", r.percentile, r.rate_bps, r.spectral_efficiency);
            }
        }
        Command::SweepDensity { checkpoint, n_values } => {
            if !n_values.is_empty() {
                config.sweep.n_values = n_values;
                config.validate()?;
            }
            let n_values = config.sweep.n_values.clone();
            for r in harness::run_density_sweep(&config, checkpoint.as_deref(), &n_values)? {
                println!("n={:<3} {:<10} {:.6e} bit/s", r.num_subnetworks, r.method, r.mean_rate_bps);
            }
        }
        Command::SweepClutter { checkpoint } => {
            let scenarios = config.sweep.clutter.clone();
            for r in harness::run_clutter_sweep(&config, checkpoint.as_deref(), &scenarios)? {
                println!(
                    "{:<10} {:<10} min {:.4e} avg {:.4e} max {:.4e} bit/s",
                    r.scenario, r.method, r.min_rate_bps, r.avg_rate_bps, r.max_rate_bps
                );
            }
        }
        Command::Baseline => {
            let stats = harness::run_baseline(&config)?;
            let mean = stats.iter().map(|s| s.mean_reward).sum::<f64>() / stats.len().max(1) as f64;
            println!("{} mean reward {:.4} over {} episodes", config.mode, mean, stats.len());
        }
        Command::OracleCheck { snapshots } => {
            let checks = harness::oracle_check(&config, snapshots)?;
            for c in &checks {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.pass) {
                return Err(Error::Mismatch("oracle check failed".into()));
            }
        }
    }
    eprintln!("output: {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
