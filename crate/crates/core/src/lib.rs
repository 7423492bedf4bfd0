//! Hierarchical KL-regularized reinforcement learning at desk scale.
//!
//! The crate is organized around a small differentiable MLP engine ([`mlp`])
//! and closed-form distributions ([`dist`]), on top of which sit the
//! hierarchical policy stack ([`policy`]), the regularized-return objectives
//! ([`objective`]), off-policy target estimators ([`offpolicy`]), the three
//! parameter-update procedures ([`learner`]), desk-scale environments
//! ([`env`]), and independent verification oracles ([`oracle`]).

pub mod dist;
pub mod env;
pub mod error;
pub mod learner;
pub mod mlp;
pub mod objective;
pub mod offpolicy;
pub mod oracle;
pub mod policy;

pub use error::{Error, Result};

/// Deterministic RNG used throughout; seedable and stable across platforms.
pub type SeedRng = rand_chacha::ChaCha8Rng;
