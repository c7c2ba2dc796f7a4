//! Decentralized dual-adapter learning over a gossip network.
//!
//! Each agent holds a frozen random-feature backbone plus two linear heads:
//! a shared head averaged with neighbours through a doubly stochastic mixing
//! matrix, and a personalized head that never leaves the agent. Predictions
//! mix the two heads' logits with a per-agent coefficient `mu`.

pub mod config;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod runner;
pub mod topology;
pub mod trainer;
pub mod verification;

pub use config::{parse_config, parse_config_str, RunConfig};
pub use error::{Error, Result};
pub use runner::{run, Mode, Outcome};
