use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{EpisodeRecord, Problem};
use crate::error::{Error, Result};
use crate::exec;
use crate::nets::{PolicyParams, ValueParams};
use crate::ppo::EpisodeSource;

use super::{
    run_episode, run_prompt_baseline, EpisodeConfig, LearnedPolicy, Orchestrator, PlannerPolicy,
    PlanningMode, PolicyVariant, PromptBaseline,
};

/// RNG of the `index`-th episode of a run seeded with `seed`.
pub(crate) fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Aggregate results of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub mode: String,
    pub max_rounds: usize,
    pub problems: usize,
    pub correct: usize,
    pub failed: usize,
    pub malformed: usize,
    /// Correct over graded episodes (failed ones count as incorrect unless
    /// excluded by configuration).
    pub accuracy: f64,
    pub mean_rounds: f64,
    pub mean_elapsed_ms: f64,
    #[serde(skip)]
    pub episodes: Vec<EpisodeRecord>,
}

impl EvalReport {
    fn from_episodes(
        policy: String,
        mode: String,
        max_rounds: usize,
        episodes: Vec<EpisodeRecord>,
        exclude_failed: bool,
    ) -> Self {
        let n = episodes.len();
        let correct = episodes.iter().filter(|e| e.correct).count();
        let failed = episodes.iter().filter(|e| e.flags.failed).count();
        let malformed = episodes.iter().filter(|e| e.flags.malformed).count();
        let denom = if exclude_failed { n - failed } else { n };
        let mean = |f: &dyn Fn(&EpisodeRecord) -> f64| {
            if n == 0 {
                0.0
            } else {
                episodes.iter().map(f).sum::<f64>() / n as f64
            }
        };
        EvalReport {
            policy,
            mode,
            max_rounds,
            problems: n,
            correct,
            failed,
            malformed,
            accuracy: if denom == 0 {
                0.0
            } else {
                correct as f64 / denom as f64
            },
            mean_rounds: mean(&|e| e.reasoning_rounds() as f64),
            mean_elapsed_ms: mean(&|e| e.elapsed_ms),
            episodes,
        }
    }

    /// One-line human-readable summary.
    pub fn summary_line(&self) -> String {
        format!(
            "{:<12} {:<22} rounds={} n={:<5} acc={:.4} mean_rounds={:.2} failed={} malformed={}",
            self.policy,
            self.mode,
            self.max_rounds,
            self.problems,
            self.accuracy,
            self.mean_rounds,
            self.failed,
            self.malformed
        )
    }
}

/// Runs one episode per problem. Learned planners act greedily.
pub fn evaluate(
    orch: &Orchestrator,
    problems: &[Problem],
    policy: &PlannerPolicy,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<EvalReport> {
    if problems.is_empty() {
        return Err(Error::config("evaluation dataset is empty"));
    }
    let policy = match &policy.variant {
        PolicyVariant::Learned(net) if net.sample => PlannerPolicy::new(
            PolicyVariant::Learned(Arc::new(LearnedPolicy {
                sample: false,
                ..(**net).clone()
            })),
            policy.mode,
        ),
        _ => policy.clone(),
    };
    orch.strategy_embeddings()?;
    let episodes = exec::map(problems, |i, p| {
        let mut rng = episode_rng(seed, i as u64);
        run_episode(orch, p, &policy, cfg, &mut rng)
    });
    Ok(EvalReport::from_episodes(
        policy.variant.name().to_string(),
        policy.mode.to_string(),
        cfg.max_rounds,
        episodes,
        cfg.exclude_failed,
    ))
}

/// Evaluates a single-prompt baseline. Few-shot demonstrations are the
/// first `k` entries of `demos` that differ from the problem asked.
pub fn evaluate_prompt_baseline(
    orch: &Orchestrator,
    problems: &[Problem],
    baseline: PromptBaseline,
    demos: &[Problem],
    k: usize,
    cfg: &EpisodeConfig,
) -> Result<EvalReport> {
    if problems.is_empty() {
        return Err(Error::config("evaluation dataset is empty"));
    }
    let results = exec::map(problems, |_, p| {
        let picked: Vec<Problem> = demos
            .iter()
            .filter(|d| d.id != p.id)
            .take(k)
            .cloned()
            .collect();
        run_prompt_baseline(orch, p, baseline, &picked, cfg)
    });
    let episodes = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_episodes(
        baseline.name().to_string(),
        "prompt".to_string(),
        0,
        episodes,
        cfg.exclude_failed,
    ))
}

/// Training environment: each episode draws a problem uniformly from the
/// pool and samples actions from the current policy.
pub struct PpoEnv<'a> {
    pub orch: &'a Orchestrator,
    pub problems: Vec<Problem>,
    pub cfg: EpisodeConfig,
    pub mode: PlanningMode,
    pub seed: u64,
}

impl<'a> PpoEnv<'a> {
    pub fn new(
        orch: &'a Orchestrator,
        problems: Vec<Problem>,
        cfg: EpisodeConfig,
        seed: u64,
    ) -> Self {
        PpoEnv {
            orch,
            problems,
            cfg,
            mode: PlanningMode::default(),
            seed,
        }
    }
}

impl EpisodeSource for PpoEnv<'_> {
    fn collect(
        &self,
        policy: &PolicyParams,
        value: &ValueParams,
        first: u64,
        count: usize,
    ) -> Result<Vec<EpisodeRecord>> {
        if self.problems.is_empty() {
            return Err(Error::config("no training problems"));
        }
        self.orch.strategy_embeddings()?;
        let planner =
            PlannerPolicy::learned(policy.clone(), Some(value.clone()), true).with_mode(self.mode);
        let ids: Vec<u64> = (first..first + count as u64).collect();
        Ok(exec::map(&ids, |_, &id| {
            let mut rng = episode_rng(self.seed, id);
            let p = &self.problems[rng.gen_range(0..self.problems.len())];
            run_episode(self.orch, p, &planner, &self.cfg, &mut rng)
        }))
    }
}
