//! The planner/reasoner interaction loop, baseline planners, prompt
//! baselines and the evaluation harness.

mod baselines;
mod episode;
mod eval;

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::domain::RewardScheme;
use crate::error::Result;
use crate::gateway::prompts::Aspect;
use crate::gateway::SharedBackend;
use crate::nets::{PolicyParams, ValueParams};
use crate::strategy::MetaStrategy;

pub use baselines::{run_prompt_baseline, select_best, PromptBaseline};
pub use eval::{evaluate, evaluate_prompt_baseline, EvalReport, PpoEnv};

/// How the planner's action set is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanningMode {
    /// Score the strategies, then turn the chosen one into a hint. Without
    /// `with_hint` the raw instruction text is handed to the reasoner.
    PickStrategy { with_hint: bool },
    /// Generate one hint per candidate and score the hints. Without
    /// `with_strategy` ten unconditioned hints are sampled instead.
    PickHint { with_strategy: bool },
}

impl Default for PlanningMode {
    fn default() -> Self {
        PlanningMode::PickStrategy { with_hint: true }
    }
}

impl fmt::Display for PlanningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlanningMode::PickStrategy { with_hint: true } => "pick-strategy",
            PlanningMode::PickStrategy { with_hint: false } => "pick-strategy-no-hint",
            PlanningMode::PickHint {
                with_strategy: true,
            } => "pick-hint",
            PlanningMode::PickHint {
                with_strategy: false,
            } => "pick-hint-no-strategy",
        })
    }
}

impl FromStr for PlanningMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pick-strategy" => Ok(PlanningMode::PickStrategy { with_hint: true }),
            "pick-strategy-no-hint" => Ok(PlanningMode::PickStrategy { with_hint: false }),
            "pick-hint" => Ok(PlanningMode::PickHint { with_strategy: true }),
            "pick-hint-no-strategy" => Ok(PlanningMode::PickHint { with_strategy: false }),
            other => Err(format!(
                "unknown mode '{other}' (expected pick-strategy, pick-strategy-no-hint, pick-hint, pick-hint-no-strategy)"
            )),
        }
    }
}

/// Tree-of-thought planner settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ToTConfig {
    pub hint_samples: usize,
    pub hint_aspects: Vec<Aspect>,
    pub reasoning_aspects: Vec<Aspect>,
    /// Sampling temperature of the candidate hints.
    pub temperature: f64,
}

impl Default for ToTConfig {
    fn default() -> Self {
        ToTConfig {
            hint_samples: 3,
            hint_aspects: Aspect::HINT.to_vec(),
            reasoning_aspects: Aspect::REASONING.to_vec(),
            temperature: 1.0,
        }
    }
}

/// Networks of a trained planner.
#[derive(Debug, Clone)]
pub struct LearnedPolicy {
    pub policy: PolicyParams,
    pub value: Option<ValueParams>,
    /// Sample from the action distribution instead of taking the argmax.
    pub sample: bool,
}

#[derive(Debug, Clone)]
pub enum PolicyVariant {
    Learned(Arc<LearnedPolicy>),
    Random,
    CoTPrompted,
    ToTSearch(ToTConfig),
    /// Plays the given strategies in order, then Finish.
    Scripted(Vec<MetaStrategy>),
}

impl PolicyVariant {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyVariant::Learned(_) => "learned",
            PolicyVariant::Random => "random",
            PolicyVariant::CoTPrompted => "cot",
            PolicyVariant::ToTSearch(_) => "tot",
            PolicyVariant::Scripted(_) => "scripted",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlannerPolicy {
    pub variant: PolicyVariant,
    pub mode: PlanningMode,
}

impl PlannerPolicy {
    pub fn new(variant: PolicyVariant, mode: PlanningMode) -> Self {
        PlannerPolicy { variant, mode }
    }

    pub fn random() -> Self {
        Self::new(PolicyVariant::Random, PlanningMode::default())
    }

    pub fn learned(policy: PolicyParams, value: Option<ValueParams>, sample: bool) -> Self {
        Self::new(
            PolicyVariant::Learned(Arc::new(LearnedPolicy {
                policy,
                value,
                sample,
            })),
            PlanningMode::default(),
        )
    }

    pub fn with_mode(mut self, mode: PlanningMode) -> Self {
        self.mode = mode;
        self
    }
}

/// Per-episode settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub max_rounds: usize,
    pub reward: RewardScheme,
    pub hint_temperature: f64,
    /// Temperature of the unconditioned hints in pick-hint-no-strategy mode.
    pub free_hint_temperature: f64,
    pub max_tokens: u32,
    /// The random planner never opens with Finish (used for BC collection).
    pub random_skips_opening_finish: bool,
    /// Store embeddings in transitions even for planners that do not need
    /// them.
    pub record_embeddings: bool,
    pub record_exchanges: bool,
    /// Leave failed episodes out of accuracy denominators.
    pub exclude_failed: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            max_rounds: 2,
            reward: RewardScheme::Pm1,
            hint_temperature: 0.0,
            free_hint_temperature: 1.0,
            max_tokens: 512,
            random_skips_opening_finish: false,
            record_embeddings: false,
            record_exchanges: true,
            exclude_failed: false,
        }
    }
}

/// Shared handle on the backend plus cached strategy embeddings.
pub struct Orchestrator {
    backend: SharedBackend,
    strategy_embeddings: OnceLock<Vec<Vec<f64>>>,
}

impl Orchestrator {
    pub fn new(backend: SharedBackend) -> Self {
        Orchestrator {
            backend,
            strategy_embeddings: OnceLock::new(),
        }
    }

    pub fn backend(&self) -> &SharedBackend {
        &self.backend
    }

    /// Embeddings of the ten instruction texts, in canonical order.
    pub fn strategy_embeddings(&self) -> Result<&[Vec<f64>]> {
        if let Some(e) = self.strategy_embeddings.get() {
            return Ok(e);
        }
        let computed = MetaStrategy::ALL
            .iter()
            .map(|s| Ok(self.backend.embed(s.instruction())?.into_inner()))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.strategy_embeddings.get_or_init(|| computed))
    }

    pub fn strategy_embedding(&self, s: MetaStrategy) -> Result<Vec<f64>> {
        Ok(self.strategy_embeddings()?[s.index()].clone())
    }
}

impl fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Orchestrator")
            .field("backend", &self.backend.identity())
            .finish()
    }
}

pub use episode::{run_episode, select_hint_tot, select_strategy_cot, EpisodeRun};
