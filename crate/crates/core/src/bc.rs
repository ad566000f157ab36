//! Behavior-cloning initialization of the planner policy: random-policy
//! trajectory collection, difficulty estimation, curriculum filtering and
//! supervised training.

use std::collections::BTreeSet;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{EpisodeRecord, Problem};
use crate::error::{Error, Result};
use crate::exec;
use crate::nets::{
    log_prob_logit_grad, policy_backward, policy_forward, Adam, Parameters, PolicyParams,
};
use crate::orchestrator::{run_episode, EpisodeConfig, Orchestrator, PlannerPolicy};

/// One supervised example taken from a successful trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcPair {
    pub obs_embedding: Vec<f64>,
    pub action_embeddings: Vec<Vec<f64>>,
    pub action_index: usize,
    pub problem_id: String,
    /// Position of the source episode in the trajectory store.
    pub episode: usize,
}

/// Random-policy success rate of one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub problem_id: String,
    pub successes: u32,
    pub samples: u32,
    pub delta: f64,
}

impl DifficultyRecord {
    pub fn new(problem_id: impl Into<String>, successes: u32, samples: u32) -> Result<Self> {
        if samples == 0 || successes > samples {
            return Err(Error::config(format!(
                "invalid difficulty counts {successes}/{samples}"
            )));
        }
        Ok(DifficultyRecord {
            problem_id: problem_id.into(),
            successes,
            samples,
            delta: f64::from(successes) / f64::from(samples),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub samples_per_problem: usize,
    pub max_rounds: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            samples_per_problem: 32,
            max_rounds: 2,
        }
    }
}

/// Runs `samples_per_problem` random-policy episodes on every problem.
///
/// Episodes come back grouped by problem in input order. Failed episodes are
/// kept in the list but left out of both difficulty counts; a problem whose
/// episodes all failed gets no difficulty record.
pub fn collect_bc_trajectories(
    orch: &Orchestrator,
    problems: &[Problem],
    cfg: &CollectConfig,
    episode_cfg: &EpisodeConfig,
    seed: u64,
) -> Result<(Vec<EpisodeRecord>, Vec<DifficultyRecord>)> {
    if problems.is_empty() {
        return Err(Error::config("no problems to collect trajectories on"));
    }
    if cfg.samples_per_problem == 0 {
        return Err(Error::config("samples_per_problem must be positive"));
    }
    let ecfg = EpisodeConfig {
        max_rounds: cfg.max_rounds,
        random_skips_opening_finish: true,
        record_embeddings: true,
        ..episode_cfg.clone()
    };
    orch.strategy_embeddings()?;
    let k = cfg.samples_per_problem;
    let jobs: Vec<(usize, usize)> = (0..problems.len())
        .flat_map(|p| (0..k).map(move |s| (p, s)))
        .collect();
    let policy = PlannerPolicy::random();
    let episodes = exec::map(&jobs, |job, &(p, _)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(job as u64);
        run_episode(orch, &problems[p], &policy, &ecfg, &mut rng)
    });
    let mut records = Vec::with_capacity(problems.len());
    for (p, chunk) in problems.iter().zip(episodes.chunks(k)) {
        let ok: Vec<&EpisodeRecord> = chunk.iter().filter(|e| !e.flags.failed).collect();
        if ok.len() < chunk.len() {
            warn!(
                "{}: {} of {k} episodes failed",
                p.id,
                chunk.len() - ok.len()
            );
        }
        if ok.is_empty() {
            continue;
        }
        let successes = ok.iter().filter(|e| e.correct).count();
        records.push(DifficultyRecord::new(
            p.id.clone(),
            successes as u32,
            ok.len() as u32,
        )?);
    }
    Ok((episodes, records))
}

/// State-action pairs of every successful episode. Forced decisions (a
/// single candidate) carry no choice and are skipped.
pub fn bc_pairs(episodes: &[EpisodeRecord]) -> Vec<BcPair> {
    let mut pairs = Vec::new();
    for (i, e) in episodes.iter().enumerate() {
        if !e.correct || e.flags.failed {
            continue;
        }
        for t in &e.transitions {
            if t.num_candidates() > 1 && t.has_embeddings() {
                pairs.push(BcPair {
                    obs_embedding: t.obs_embedding.clone(),
                    action_embeddings: t.action_embeddings.clone(),
                    action_index: t.action_index,
                    problem_id: e.problem_id.clone(),
                    episode: i,
                });
            }
        }
    }
    pairs
}

/// Ids of problems with `lo <= delta <= hi`.
pub fn curriculum_filter(records: &[DifficultyRecord], lo: f64, hi: f64) -> BTreeSet<String> {
    records
        .iter()
        .filter(|r| lo <= r.delta && r.delta <= hi)
        .map(|r| r.problem_id.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub val_fraction: f64,
    pub hidden: usize,
    pub grad_clip: f64,
    /// Validation accuracy is measured every this many steps.
    pub eval_every: usize,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            lr: 1e-4,
            batch: 16,
            steps: 10_000,
            val_fraction: 0.1,
            hidden: crate::nets::DEFAULT_HIDDEN,
            grad_clip: 10.0,
            eval_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcOutcome {
    /// Parameters with the best validation accuracy seen.
    pub params: PolicyParams,
    pub val_accuracy: f64,
    pub best_step: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    /// Mean minibatch loss at each step.
    pub losses: Vec<f64>,
}

/// Top-1 accuracy of the greedy policy on `pairs`.
pub fn accuracy(params: &PolicyParams, pairs: &[&BcPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for p in pairs {
        let (out, _) = policy_forward(params, &p.obs_embedding, &p.action_embeddings)?;
        let best = out
            .probs
            .iter()
            .enumerate()
            .fold(0, |b, (i, x)| if *x > out.probs[b] { i } else { b });
        hits += usize::from(best == p.action_index);
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Minimizes cross-entropy of the chosen action, starting from `init`.
/// Pairs are split 9:1 (by default) into train and validation with `seed`.
pub fn train_bc(
    pairs: &[BcPair],
    init: PolicyParams,
    cfg: &BcConfig,
    seed: u64,
) -> Result<BcOutcome> {
    if pairs.is_empty() {
        return Err(Error::config(
            "behavior cloning needs at least one state-action pair",
        ));
    }
    if cfg.batch == 0 || cfg.eval_every == 0 || !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::config(
            "batch and eval_every must be positive, val_fraction in [0, 1)",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((pairs.len() as f64) * cfg.val_fraction).round() as usize;
    let n_val = n_val.min(pairs.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<&BcPair> = train_idx.iter().map(|&i| &pairs[i]).collect();
    let val: Vec<&BcPair> = val_idx.iter().map(|&i| &pairs[i]).collect();
    // Without a validation split, selection falls back to training accuracy.
    let select_on = if val.is_empty() { &train } else { &val };

    let mut params = init;
    let mut opt = Adam::new(&params);
    let mut best = (accuracy(&params, select_on)?, 0usize, params.clone());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut cursor = train.len();
    let mut perm: Vec<usize> = (0..train.len()).collect();
    for step in 1..=cfg.steps {
        let mut grads = params.zeros_like();
        let mut loss = 0.0;
        let scale = 1.0 / cfg.batch as f64;
        for _ in 0..cfg.batch {
            if cursor == perm.len() {
                perm.shuffle(&mut rng);
                cursor = 0;
            }
            let p = train[perm[cursor]];
            cursor += 1;
            let (out, cache) = policy_forward(&params, &p.obs_embedding, &p.action_embeddings)?;
            loss -= out.log_probs[p.action_index] * scale;
            // d(-log p)/d logits
            let d = log_prob_logit_grad(&out.probs, p.action_index, -scale);
            grads.add_scaled(&policy_backward(&params, &cache, &d)?, 1.0);
        }
        opt.step(&mut params, &grads, cfg.lr, cfg.grad_clip)?;
        losses.push(loss);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let acc = accuracy(&params, select_on)?;
            if acc > best.0 {
                best = (acc, step, params.clone());
            }
        }
    }
    info!(
        "behavior cloning: best validation accuracy {:.4} at step {} ({} train / {} val pairs)",
        best.0,
        best.1,
        train.len(),
        val.len()
    );
    Ok(BcOutcome {
        params: best.2,
        val_accuracy: best.0,
        best_step: best.1,
        train_pairs: train.len(),
        val_pairs: val.len(),
        losses,
    })
}
