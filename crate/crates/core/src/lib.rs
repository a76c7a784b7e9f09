//! Rank-based reinforcement learning for quality scoring on a toy policy.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod policy;
pub mod quality;
pub mod reward;
pub mod thurstone;
pub mod train;

pub use error::{Error, Result};
