//! Guarded latent communication between transformer agents.
//!
//! Agents in a multi-agent system exchange final-layer key/value caches
//! instead of text. This crate implements that pipeline end to end at desk
//! scale: tiny trainable transformer agents, communication functions that
//! sanitize caches before transmission (identity, learned residual
//! bottleneck, Gaussian noise), reconstruction adversaries that try to
//! recover each agent's private input from the observed artifacts, the
//! alternating minimax trainer that pits the two against each other, and the
//! evaluation suite (task accuracy, helpfulness, privacy, leak rate, attack
//! success rate, reconstruction difficulty) on synthetic planted-secret
//! tasks.
//!
//! Everything is deterministic under a seed and runs on one CPU core; see
//! the crate examples for end-to-end walkthroughs of each capability.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
