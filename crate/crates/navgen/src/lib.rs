//! Language-grounded navigation in synthetic graph worlds.
//!
//! The library is organized bottom-up:
//!
//! - [`world`]: procedural navigation graphs, agent state, action embeddings
//! - [`instructions`]: templated route instructions and the token vocabulary
//! - [`dataset`]: episode sampling, splits, and on-disk dataset layout
//! - [`ndgrad`]: reverse-mode autodiff, optimizers, checkpoints
//! - [`models`]: recurrent follower (action scorer) and speaker (instruction
//!   language model) networks
//! - [`policies`]: action selection rules and trajectory rollouts
//! - [`learn`]: imitation training loops
//! - [`metrics`]: trajectory evaluation measures
//! - [`tent`]: token-wise prediction-entropy profiles
//! - [`cli`]: the `navgen` command-line interface
//!
//! Everything is deterministic given a seed: identical inputs produce
//! byte-identical outputs regardless of thread count.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod instructions;
pub mod learn;
pub mod tent;
pub mod metrics;
pub mod models;
pub mod ndgrad;
pub mod par;
pub mod policies;
pub mod seeds;
pub mod world;

pub use error::{NavError, Result};
