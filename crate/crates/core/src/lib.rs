//! Desk-scale laboratory for outcome-reward RL on star-graph search.
//!
//! The crate generates path-finding tasks ([`graphtask`]), trains a tiny
//! pointer-transformer policy with exact gradients ([`policy`]), computes
//! Dr.GRPO, VinePPO, Progress-Rewards and Best-of-N-aware coefficients
//! ([`estimators`]), runs the on-policy loop ([`trainer`]), and checks the
//! estimators against brute-force references ([`oracle`]). Experiment files
//! and shipped presets live in [`experiment`].

pub mod checkpoint;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod graphtask;
pub mod oracle;
pub mod policy;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
