//! Decentralized learning with multiple local adaptive-gradient steps per
//! compressed gossip round.
//!
//! The crate is a laboratory: every agent lives in the same process, and the
//! communication rounds are simulated exactly, including the byte volume a
//! real transport would carry. Alongside the training loop it carries the
//! machinery to check the method's contraction, consensus and step-size
//! conditions against measured runs.
//!
//! Module map:
//! - [`topology`]: graphs, Metropolis mixing matrices, spectral gap.
//! - [`compression`]: contraction operators with payload accounting.
//! - [`localopt`]: first/second moment rules and the local step.
//! - [`problems`]: synthetic objectives, shards and gradient oracles.
//! - [`engine`]: the local-steps + compressed-gossip loop.
//! - [`analysis`]: theoretical constants and post-hoc bound checks.
//! - [`experiment`]: config files, sweep grids, artifacts and reports.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod compression;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod localopt;
pub mod problems;
pub mod rng;
pub mod topology;

pub use error::{Error, Result};
