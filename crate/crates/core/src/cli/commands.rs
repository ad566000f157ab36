use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bc::{
    bc_pairs, collect_bc_trajectories, curriculum_filter, train_bc, BcPair, DifficultyRecord,
};
use crate::checkpoint::Checkpoint;
use crate::domain::{EpisodeRecord, Problem, Split};
use crate::error::{Error, Result};
use crate::gateway::{GenerateOptions, HttpBackend, ScriptedWorld, SharedBackend, WorldSpec};
use crate::nets::{PolicyParams, ValueParams};
use crate::orchestrator::{
    evaluate, evaluate_prompt_baseline, EpisodeConfig, EvalReport, Orchestrator, PlannerPolicy,
    PolicyVariant, PpoEnv, PromptBaseline, ToTConfig,
};
use crate::ppo::{train_ppo, MetricsRow, PpoState};

use super::artifacts::{self, Manifest, OutputLock};
use super::config::{BackendKind, RunConfig};

/// Offsets that give every pipeline stage its own random stream.
mod stage {
    pub const COLLECT: u64 = 1;
    pub const BC_INIT: u64 = 2;
    pub const BC_TRAIN: u64 = 3;
    pub const PPO_INIT: u64 = 4;
    pub const PPO_ENV: u64 = 5;
    pub const PPO_STATE: u64 = 6;
    pub const EVAL: u64 = 7;
}

fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Planner names accepted by `eval`.
pub const PLANNER_NAMES: [&str; 4] = ["random", "learned", "cot", "tot"];

/// Shared state of a command run inside a locked output directory.
pub struct Session {
    pub cfg: RunConfig,
    pub overrides: Vec<String>,
    pub orch: Orchestrator,
    world: Option<WorldSpec>,
    _lock: OutputLock,
}

impl Session {
    pub fn open(cfg: RunConfig, overrides: Vec<String>) -> Result<Self> {
        cfg.validate()?;
        let (backend, world) = build_backend(&cfg)?;
        let lock = OutputLock::acquire(&cfg.out)?;
        Ok(Session {
            cfg,
            overrides,
            orch: Orchestrator::new(backend),
            world,
            _lock: lock,
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    fn manifest(&self, command: &str) -> Result<()> {
        Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.cfg.seed,
            backend: self.orch.backend().identity(),
            overrides: &self.overrides,
            config: &self.cfg,
        }
        .write(&self.cfg.out)
    }

    fn seed(&self, stage: u64) -> u64 {
        stage_seed(self.cfg.seed, stage)
    }

    fn datasets(&self) -> Result<Datasets> {
        let from_world = |split: Split| -> Result<Vec<Problem>> {
            match &self.world {
                Some(w) => Ok(w.problems_in(split)),
                None => Err(Error::config(format!(
                    "no {} dataset configured (set data.{})",
                    if split == Split::Train {
                        "training"
                    } else {
                        "test"
                    },
                    if split == Split::Train {
                        "train"
                    } else {
                        "test"
                    }
                ))),
            }
        };
        let load = |path: &Path| {
            crate::domain::load_problems(path)
                .map_err(|e| Error::config(format!("cannot load dataset {}: {e}", path.display())))
        };
        let train = match &self.cfg.data.train {
            Some(p) => load(p)?,
            None => from_world(Split::Train)?,
        };
        let test = match &self.cfg.data.test {
            Some(p) => load(p)?,
            None => from_world(Split::Test)?,
        };
        let (train, val) =
            split_validation(train, self.cfg.data.val_fraction, self.cfg.data.split_seed);
        Ok(Datasets { train, val, test })
    }

    fn episode_config(&self) -> EpisodeConfig {
        self.cfg.episode.clone()
    }
}

pub struct Datasets {
    pub train: Vec<Problem>,
    pub val: Vec<Problem>,
    pub test: Vec<Problem>,
}

/// Moves a seeded random share of `problems` into a validation split; the
/// rest keep their original order.
pub fn split_validation(
    problems: Vec<Problem>,
    fraction: f64,
    seed: u64,
) -> (Vec<Problem>, Vec<Problem>) {
    let n_val = (problems.len() as f64 * fraction).round() as usize;
    if n_val == 0 {
        return (problems, Vec::new());
    }
    let mut idx: Vec<usize> = (0..problems.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held: BTreeSet<usize> = idx[..n_val].iter().copied().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, mut p) in problems.into_iter().enumerate() {
        if held.contains(&i) {
            p.split = Split::Validation;
            val.push(p);
        } else {
            train.push(p);
        }
    }
    (train, val)
}

fn build_backend(cfg: &RunConfig) -> Result<(SharedBackend, Option<WorldSpec>)> {
    match cfg.backend.kind {
        BackendKind::Mock => {
            let spec = match &cfg.backend.scenario {
                Some(path) => WorldSpec::load(path).map_err(|e| Error::config(e.to_string()))?,
                None => WorldSpec::generate(&GenerateOptions::default()),
            };
            let world = ScriptedWorld::new(spec.clone())?;
            Ok((Arc::new(world), Some(spec)))
        }
        BackendKind::Http => {
            let backend = HttpBackend::new(cfg.backend.http.clone().with_env())?;
            Ok((Arc::new(backend), None))
        }
    }
}

fn strip_embeddings(mut e: EpisodeRecord) -> EpisodeRecord {
    for t in &mut e.transitions {
        t.obs_embedding.clear();
        t.action_embeddings.clear();
    }
    e
}

pub fn collect_bc(s: &Session) -> Result<()> {
    s.manifest("collect-bc")?;
    let data = s.datasets()?;
    let (episodes, difficulty) = collect_bc_trajectories(
        &s.orch,
        &data.train,
        &s.cfg.collect,
        &s.episode_config(),
        s.seed(stage::COLLECT),
    )?;
    let pairs = bc_pairs(&episodes);
    let successes = episodes.iter().filter(|e| e.correct).count();
    let failed = episodes.iter().filter(|e| e.flags.failed).count();
    let kept = curriculum_filter(&difficulty, s.cfg.filter.lo, s.cfg.filter.hi);
    let stored: Vec<EpisodeRecord> = episodes.into_iter().map(strip_embeddings).collect();
    artifacts::write_jsonl(&s.out(artifacts::EPISODES), &stored)?;
    artifacts::write_jsonl(&s.out(artifacts::BC_PAIRS), &pairs)?;
    artifacts::write_csv(&s.out(artifacts::DIFFICULTY), &difficulty)?;
    println!(
        "problems={} episodes={} successes={} success_rate={:.4} failed={} bc_pairs={} within_filter={}",
        data.train.len(),
        stored.len(),
        successes,
        successes as f64 / stored.len().max(1) as f64,
        failed,
        pairs.len(),
        kept.len()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct BcReport {
    val_accuracy: f64,
    best_step: usize,
    train_pairs: usize,
    val_pairs: usize,
}

pub fn train_bc_cmd(s: &Session) -> Result<()> {
    s.manifest("train-bc")?;
    let path = s.out(artifacts::BC_PAIRS);
    if !path.exists() {
        return Err(Error::config(format!(
            "no trajectory store at {} (run collect-bc first)",
            path.display()
        )));
    }
    let pairs: Vec<BcPair> = artifacts::read_jsonl(&path)?;
    let first = pairs
        .first()
        .ok_or_else(|| Error::config("the trajectory store holds no state-action pairs"))?;
    let d = first.obs_embedding.len();
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed(stage::BC_INIT));
    let init = PolicyParams::init(d, s.cfg.bc.hidden, &mut rng);
    let outcome = train_bc(&pairs, init, &s.cfg.bc, s.seed(stage::BC_TRAIN))?;
    let report = BcReport {
        val_accuracy: outcome.val_accuracy,
        best_step: outcome.best_step,
        train_pairs: outcome.train_pairs,
        val_pairs: outcome.val_pairs,
    };
    Checkpoint::from_policy(
        outcome.params,
        json!({"stage": "bc", "seed": s.cfg.seed, "report": &report}),
    )
    .save(&s.out(artifacts::BC_CHECKPOINT))?;
    artifacts::write_json(&s.out(artifacts::BC_REPORT), &report)?;
    println!(
        "bc val_accuracy={:.4} best_step={} train_pairs={} val_pairs={}",
        report.val_accuracy, report.best_step, report.train_pairs, report.val_pairs
    );
    Ok(())
}

/// Problems PPO trains on: the training split, curriculum-filtered unless
/// the filter is disabled.
pub fn ppo_problems(
    train: Vec<Problem>,
    difficulty: Option<&[DifficultyRecord]>,
    lo: f64,
    hi: f64,
) -> Result<Vec<Problem>> {
    let Some(records) = difficulty else {
        return Ok(train);
    };
    let kept = curriculum_filter(records, lo, hi);
    let out: Vec<Problem> = train.into_iter().filter(|p| kept.contains(&p.id)).collect();
    if out.is_empty() {
        return Err(Error::config(
            "the curriculum filter left no training problems",
        ));
    }
    Ok(out)
}

pub fn train_ppo_cmd(s: &Session, resume: bool) -> Result<()> {
    s.manifest("train-ppo")?;
    let data = s.datasets()?;
    let d = s.orch.backend().embedding_dim()?;
    let difficulty = if s.cfg.filter.enabled {
        let path = s.out(artifacts::DIFFICULTY);
        if !path.exists() {
            return Err(Error::config(format!(
                "no difficulty table at {} (run collect-bc or pass --no-filter)",
                path.display()
            )));
        }
        Some(artifacts::read_csv::<DifficultyRecord>(&path)?)
    } else {
        None
    };
    let problems = ppo_problems(
        data.train,
        difficulty.as_deref(),
        s.cfg.filter.lo,
        s.cfg.filter.hi,
    )?;
    info!("training on {} problems", problems.len());

    let ckpt_path = s.out(artifacts::PPO_CHECKPOINT);
    let metrics_path = s.out(artifacts::METRICS);
    let (mut state, mut rows) = if resume && ckpt_path.exists() {
        let c = Checkpoint::load(&ckpt_path)?;
        let state = c
            .ppo
            .ok_or_else(|| Error::config("checkpoint has no PPO state to resume from"))?;
        let rows: Vec<MetricsRow> = if metrics_path.exists() {
            artifacts::read_csv(&metrics_path)?
        } else {
            Vec::new()
        };
        info!(
            "resuming at update {} (env step {})",
            state.updates, state.env_steps
        );
        (state, rows)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed(stage::PPO_INIT));
        let policy = if s.cfg.training.from_scratch {
            PolicyParams::init(d, s.cfg.bc.hidden, &mut rng)
        } else {
            let path = s
                .cfg
                .training
                .init_checkpoint
                .clone()
                .unwrap_or_else(|| s.out(artifacts::BC_CHECKPOINT));
            if !path.exists() {
                return Err(Error::config(format!(
                    "no BC checkpoint at {} (run train-bc or pass --from-scratch)",
                    path.display()
                )));
            }
            Checkpoint::load(&path)?.policy
        };
        if policy.input_dim() != d {
            return Err(Error::config(format!(
                "policy expects {}-dimensional embeddings but the backend produces {d}",
                policy.input_dim()
            )));
        }
        let value = ValueParams::init(d, policy.hidden(), &mut rng);
        (
            PpoState::new(policy, value, s.seed(stage::PPO_STATE)),
            Vec::new(),
        )
    };

    let mut env = PpoEnv::new(
        &s.orch,
        problems,
        s.episode_config(),
        s.seed(stage::PPO_ENV),
    );
    env.mode = s.cfg.planning_mode()?;
    let every = s.cfg.training.checkpoint_every;
    let meta = |state: &PpoState| json!({"stage": "ppo", "seed": s.cfg.seed, "env_steps": state.env_steps, "updates": state.updates});
    let mut history = rows.clone();
    let new_rows = train_ppo(&env, &mut state, &s.cfg.ppo, |st, row, _| {
        history.push(row.clone());
        if every > 0 && st.updates % every == 0 {
            Checkpoint::from_ppo(st, meta(st)).save(&ckpt_path)?;
            artifacts::write_csv(&metrics_path, &history)?;
        }
        Ok(())
    })?;
    rows.extend(new_rows);
    Checkpoint::from_ppo(&state, meta(&state)).save(&ckpt_path)?;
    artifacts::write_csv(&metrics_path, &rows)?;
    let last = rows.last();
    println!(
        "ppo updates={} env_steps={} last_accuracy={:.4} last_reward={:.4}",
        state.updates,
        state.env_steps,
        last.map_or(0.0, |r| r.accuracy),
        last.map_or(0.0, |r| r.mean_reward)
    );
    Ok(())
}

enum EvalTarget {
    Planner(PlannerPolicy),
    Prompt(PromptBaseline),
}

fn valid_policy_names() -> Vec<&'static str> {
    PLANNER_NAMES
        .iter()
        .copied()
        .chain(PromptBaseline::ALL.iter().map(|b| b.name()))
        .collect()
}

fn learned_checkpoint(s: &Session) -> Result<PathBuf> {
    if let Some(p) = &s.cfg.eval.checkpoint {
        return Ok(p.clone());
    }
    [artifacts::PPO_CHECKPOINT, artifacts::BC_CHECKPOINT]
        .iter()
        .map(|n| s.out(n))
        .find(|p| p.exists())
        .ok_or_else(|| {
            Error::config(format!(
                "no checkpoint for the learned planner in {} (set eval.checkpoint)",
                s.cfg.out.display()
            ))
        })
}

fn resolve_target(s: &Session, name: &str) -> Result<EvalTarget> {
    let mode = s.cfg.planning_mode()?;
    let planner = |v| Ok(EvalTarget::Planner(PlannerPolicy::new(v, mode)));
    match name {
        "random" => planner(PolicyVariant::Random),
        "cot" => planner(PolicyVariant::CoTPrompted),
        "tot" => planner(PolicyVariant::ToTSearch(ToTConfig {
            hint_samples: s.cfg.eval.tot_hint_samples,
            temperature: s.cfg.eval.tot_temperature,
            ..ToTConfig::default()
        })),
        "learned" => {
            let c = Checkpoint::load(&learned_checkpoint(s)?)?;
            let d = s.orch.backend().embedding_dim()?;
            if c.d != d {
                return Err(Error::config(format!(
                    "checkpoint expects {}-dimensional embeddings but the backend produces {d}",
                    c.d
                )));
            }
            Ok(EvalTarget::Planner(
                PlannerPolicy::learned(c.policy, c.value, false).with_mode(mode),
            ))
        }
        other => match other.parse::<PromptBaseline>() {
            Ok(b) => Ok(EvalTarget::Prompt(b)),
            Err(_) => Err(Error::config(format!(
                "unknown policy '{other}' (valid: {})",
                valid_policy_names().join(", ")
            ))),
        },
    }
}

#[derive(Debug, Serialize)]
struct SummaryRow<'a> {
    policy: &'a str,
    mode: &'a str,
    rounds: usize,
    problems: usize,
    correct: usize,
    accuracy: f64,
    mean_rounds: f64,
    failed: usize,
    malformed: usize,
}

pub fn eval_cmd(s: &Session) -> Result<Vec<EvalReport>> {
    s.manifest("eval")?;
    let names = &s.cfg.eval.policies;
    if names.is_empty() {
        return Err(Error::config("eval.policies is empty"));
    }
    for n in names {
        if !valid_policy_names().contains(&n.as_str()) {
            return Err(Error::config(format!(
                "unknown policy '{n}' (valid: {})",
                valid_policy_names().join(", ")
            )));
        }
    }
    let data = s.datasets()?;
    let problems = match s.cfg.eval.split.as_str() {
        "train" => &data.train,
        "val" => &data.val,
        _ => &data.test,
    };
    let dir = s.out(artifacts::EVAL_DIR);
    let mut reports = Vec::new();
    for name in names {
        match resolve_target(s, name)? {
            EvalTarget::Prompt(b) => {
                let r = evaluate_prompt_baseline(
                    &s.orch,
                    problems,
                    b,
                    &data.train,
                    s.cfg.eval.few_shot_k,
                    &s.episode_config(),
                )?;
                reports.push(r);
            }
            EvalTarget::Planner(policy) => {
                for &rounds in &s.cfg.eval.rounds {
                    let cfg = EpisodeConfig {
                        max_rounds: rounds,
                        ..s.episode_config()
                    };
                    let r = evaluate(&s.orch, problems, &policy, &cfg, s.seed(stage::EVAL))?;
                    reports.push(r);
                }
            }
        }
        let r = reports.last().expect("at least one report per policy");
        info!("{}", r.summary_line());
    }
    let mut summary = Vec::new();
    println!(
        "{:<12} {:<22} {:>6} {:>6} {:>8} {:>9}",
        "policy", "mode", "rounds", "n", "correct", "accuracy"
    );
    for r in &reports {
        let stem = format!("{}-r{}", r.policy, r.max_rounds);
        artifacts::write_json(&dir.join(format!("{stem}.json")), r)?;
        let stored: Vec<EpisodeRecord> = r.episodes.iter().cloned().map(strip_embeddings).collect();
        artifacts::write_jsonl(&dir.join(format!("{stem}.episodes.jsonl")), &stored)?;
        println!(
            "{:<12} {:<22} {:>6} {:>6} {:>8} {:>9.4}",
            r.policy, r.mode, r.max_rounds, r.problems, r.correct, r.accuracy
        );
        summary.push(SummaryRow {
            policy: &r.policy,
            mode: &r.mode,
            rounds: r.max_rounds,
            problems: r.problems,
            correct: r.correct,
            accuracy: r.accuracy,
            mean_rounds: r.mean_rounds,
            failed: r.failed,
            malformed: r.malformed,
        });
    }
    artifacts::write_csv(&s.out(artifacts::EVAL_SUMMARY), &summary)?;
    Ok(reports)
}

/// Writes a generated mock scenario and, optionally, its problems as JSONL
/// datasets.
pub fn gen_world(
    opts: &GenerateOptions,
    output: &Path,
    export: Option<&Path>,
) -> Result<WorldSpec> {
    let spec = WorldSpec::generate(opts);
    artifacts::write_json(output, &spec)?;
    if let Some(dir) = export {
        artifacts::write_jsonl(&dir.join("train.jsonl"), &spec.problems_in(Split::Train))?;
        artifacts::write_jsonl(&dir.join("test.jsonl"), &spec.problems_in(Split::Test))?;
    }
    println!(
        "wrote {} ({} problems, dim {})",
        output.display(),
        spec.problems.len(),
        spec.dim
    );
    Ok(spec)
}
