//! Simulator and training framework for distributed dynamic channel
//! allocation among mobile in-factory subnetworks.
//!
//! The crate is layered bottom-up:
//!
//! - [`radiolink`]: pathloss, shadowing, fading, SINR and finite-blocklength rate.
//! - [`factory`]: the hall layout and in-robot subnetwork mobility.
//! - [`env`]: the multi-agent environment (observations, gated actions, rewards).
//! - [`approximator`]: a small MLP with explicit backpropagation and Adam.
//! - [`agents`]: double-DQN and PPO learners.
//! - [`federated`]: federated / centralized / distributed training orchestration.
//! - [`baselines`]: graph colouring, greedy, random and brute-force allocators.
//! - [`harness`]: configuration, experiment runners and metric sinks.
//!
//! With the default `parallel` feature, data-parallel loops (gain tensor
//! construction, exhaustive search, multi-seed evaluation) run on rayon.
//! Without it everything runs sequentially and produces identical results.

// NaN must fail validation, hence `!(x > 0.0)` style checks.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod agents;
pub mod approximator;
pub mod baselines;
pub mod env;
pub mod error;
pub mod exec;
pub mod factory;
pub mod federated;
pub mod harness;
pub mod radiolink;
pub mod rng;

pub use error::{Error, Result};
