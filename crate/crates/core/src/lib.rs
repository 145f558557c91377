//! Desk-scale chain-of-thought RL fine-tuning with likelihood-based rewards.
//!
//! A policy first writes a chain of thought after `<think>`, then an answer
//! between `<answer>` tags. Rewards either verify a sampled answer or score
//! the reference answer's likelihood given the sampled CoT. Every estimator
//! has an exact counterpart in [`oracle`] on small tabular policies.

pub mod advantages;
pub mod cli;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod oracle;
pub mod policy;
pub mod protocol;
pub mod rewards;
pub mod rng;
pub mod stats;
pub mod tasks;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
