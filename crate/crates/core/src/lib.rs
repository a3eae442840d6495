//! Desk-scale laboratory for knowledge distillation of tiny autoregressive
//! language models over synthetic Markov corpora.
//!
//! The crate provides:
//! - a synthetic corpus generator with exactly known data distribution ([`corpus`]),
//! - a tiny fixed-context neural LM with exact manual backprop ([`model`]),
//! - skew KL/RKL divergences and their analytic gradients ([`divergence`]),
//! - Monte-Carlo estimator-error and gradient-coefficient studies ([`skewlab`]),
//! - the adaptive student-generated-output scheduler ([`scheduler`]),
//! - a bounded FIFO replay buffer with replay-ratio schedules ([`replay`]),
//! - the distillation training loop and baseline policies ([`distill`]),
//! - ROUGE-L and held-out evaluation ([`eval`]),
//! - a flat key-value run configuration ([`config`]).

pub mod config;
pub mod corpus;
pub mod distill;
pub mod divergence;
pub mod error;
pub mod eval;
pub mod model;
pub mod replay;
pub mod scheduler;
pub mod skewlab;

pub use error::{Error, Result};

/// Splitmix64-style mixer used to derive independent per-trial and per-pair
/// random streams from a base seed and an index.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
