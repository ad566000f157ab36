//! Cooperative planning/reasoning agents for multiple-choice problems.
//!
//! A planning agent picks one of ten meta-strategies each round and turns it
//! into a concrete hint; a reasoning agent takes one step following the hint.
//! The planner's strategy-selection policy is a small attention network over
//! text embeddings, initialized by behavior cloning and refined with PPO.

// Validation uses `!(x >= 0.0)` style checks so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bc;
pub mod checkpoint;
pub mod cli;
pub mod domain;
pub mod error;
pub mod exec;
pub mod gateway;
pub mod nets;
pub mod orchestrator;
pub mod ppo;
pub mod strategy;

pub use domain::{
    DialogueState, EpisodeRecord, Problem, RewardScheme, RoundRecord, Split, Transition,
};
pub use error::{Error, Result};
pub use strategy::{MetaStrategy, StrategyPool, NUM_STRATEGIES};
