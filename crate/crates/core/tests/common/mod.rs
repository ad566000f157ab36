//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use coplanner::nets::{
    entropy_logit_grad, log_prob_logit_grad, policy_backward, policy_forward, value_backward,
    value_forward, Parameters, PolicyParams, ValueParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-4;

/// Relative error with a floor so that entries that are zero up to rounding
/// do not dominate.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn scaled<P: Parameters>(mut p: P, factor: f64) -> P {
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= factor);
    }
    p
}

/// Max relative error between the analytic gradient of
/// `sum_i c_i log p_i + w H(p)` and central differences.
pub fn policy_fd_max_rel_err(seed: u64, d: usize, n: usize, h: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = scaled(PolicyParams::init(d, h, &mut rng), 3.0);
    for t in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    let obs = unit_vec(&mut rng, d);
    let actions: Vec<Vec<f64>> = (0..n).map(|_| unit_vec(&mut rng, d)).collect();
    let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: f64 = rng.gen_range(-1.0..1.0);

    let loss = |p: &PolicyParams| {
        let (out, _) = policy_forward(p, &obs, &actions).unwrap();
        let h: f64 = -out
            .probs
            .iter()
            .zip(&out.log_probs)
            .map(|(p, l)| p * l)
            .sum::<f64>();
        c.iter()
            .zip(&out.log_probs)
            .map(|(c, l)| c * l)
            .sum::<f64>()
            + w * h
    };

    let (out, cache) = policy_forward(&params, &obs, &actions).unwrap();
    let mut d_logits = entropy_logit_grad(&out.probs, &out.log_probs, w);
    for (i, ci) in c.iter().enumerate() {
        for (g, v) in d_logits
            .iter_mut()
            .zip(log_prob_logit_grad(&out.probs, i, *ci))
        {
            *g += v;
        }
    }
    let grads = policy_backward(&params, &cache, &d_logits)
        .unwrap()
        .flatten();
    max_err_against_fd(&mut params, &grads, loss)
}

/// Max relative error between the analytic gradient of the value output and
/// central differences.
pub fn value_fd_max_rel_err(seed: u64, d: usize, h: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = scaled(ValueParams::init(d, h, &mut rng), 3.0);
    for t in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    let obs = unit_vec(&mut rng, d);
    let loss = |p: &ValueParams| value_forward(p, &obs).unwrap().0;
    let (_, cache) = value_forward(&params, &obs).unwrap();
    let grads = value_backward(&params, &cache, 1.0).unwrap().flatten();
    max_err_against_fd(&mut params, &grads, loss)
}

fn max_err_against_fd<P: Parameters>(
    params: &mut P,
    grads: &[f64],
    loss: impl Fn(&P) -> f64,
) -> f64 {
    let base = params.flatten();
    assert_eq!(base.len(), grads.len());
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for i in 0..base.len() {
        let mut x = base.clone();
        x[i] = base[i] + FD_EPS;
        probe.assign_flat(&x).unwrap();
        let up = loss(&probe);
        x[i] = base[i] - FD_EPS;
        probe.assign_flat(&x).unwrap();
        let down = loss(&probe);
        let numeric = (up - down) / (2.0 * FD_EPS);
        worst = worst.max(rel_err(grads[i], numeric));
    }
    worst
}

/// Advantages by direct summation of discounted TD errors,
/// `A_t = sum_l (gamma lambda)^l delta_{t+l}`, and returns `A_t + V_t`.
pub fn gae_by_summation(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t_len = rewards.len();
    let delta: Vec<f64> = (0..t_len)
        .map(|t| rewards[t] + gamma * values[t + 1] - values[t])
        .collect();
    let adv: Vec<f64> = (0..t_len)
        .map(|t| {
            (t..t_len)
                .map(|k| (gamma * lambda).powi((k - t) as i32) * delta[k])
                .sum()
        })
        .collect();
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Central interval of Binomial(n, p) holding at least `level` of the mass.
pub fn binomial_interval(n: u64, p: f64, level: f64) -> (u64, u64) {
    let mut pmf = Vec::with_capacity(n as usize + 1);
    let mut log_c = 0.0f64;
    for k in 0..=n {
        if k > 0 {
            log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        pmf.push((log_c + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp());
    }
    let tail = (1.0 - level) / 2.0;
    let mut acc = 0.0;
    let mut lo = 0;
    for (k, m) in pmf.iter().enumerate() {
        acc += m;
        if acc > tail {
            lo = k as u64;
            break;
        }
    }
    acc = 0.0;
    let mut hi = n;
    for (k, m) in pmf.iter().enumerate().rev() {
        acc += m;
        if acc > tail {
            hi = k as u64;
            break;
        }
    }
    (lo, hi)
}

use std::sync::Arc;

use coplanner::domain::{render_query, render_thoughts, DialogueState, EpisodeRecord, Problem};
use coplanner::gateway::{GenerateOptions, ScriptedWorld, WorldSpec};
use coplanner::orchestrator::{
    run_episode, EpisodeConfig, Orchestrator, PlannerPolicy, PlanningMode, PolicyVariant, ToTConfig,
};
use coplanner::MetaStrategy;

/// Checks the protocol contract on one finished episode.
pub fn check_episode(
    problem: &Problem,
    record: &EpisodeRecord,
    max_rounds: usize,
) -> Result<(), String> {
    if record.flags.failed {
        return Err(format!("episode failed: {:?}", record.error));
    }
    let rounds = &record.rounds;
    let last = rounds.last().ok_or("episode has no rounds")?;
    if last.strategy != Some(MetaStrategy::Finish) {
        return Err(format!("final decision is {:?}, not Finish", last.strategy));
    }
    if rounds[..rounds.len() - 1]
        .iter()
        .any(|r| r.strategy == Some(MetaStrategy::Finish))
    {
        return Err("Finish before the final decision".into());
    }
    if rounds.len() > max_rounds + 1 {
        return Err(format!(
            "{} decisions with max_rounds {max_rounds}",
            rounds.len()
        ));
    }
    if record.transitions.len() != rounds.len() {
        return Err("transition count differs from decision count".into());
    }
    if record.reward != 1.0 && record.reward != -1.0 {
        return Err(format!("terminal reward {}", record.reward));
    }
    for (i, t) in record.transitions.iter().enumerate() {
        let terminal = i + 1 == record.transitions.len();
        if t.done != terminal || (!terminal && t.reward != 0.0) {
            return Err(format!(
                "transition {i} has done={} reward={}",
                t.done, t.reward
            ));
        }
        if terminal && t.reward != record.reward {
            return Err("terminal transition reward differs from episode reward".into());
        }
    }
    let mut state = DialogueState::new(problem.clone());
    let mut full = state.clone();
    for r in rounds {
        full.push(r.clone());
    }
    for r in rounds {
        let next = state.with_round(r.clone());
        if !state.is_prefix_of(&next) || !next.is_prefix_of(&full) {
            return Err("states are not prefix-monotone".into());
        }
        state = next;
    }
    // Every agent prompt sees a prefix of the history, and the prefixes
    // never shrink over the course of the episode. Truncated episodes show
    // suffixes instead.
    if record.flags.truncated {
        return Ok(());
    }
    let head = format!("Problem: {}\nThoughts: ", render_query(problem));
    let mut seen = 0usize;
    for ex in &record.exchanges {
        let Some(rest) = ex.prompt.strip_prefix(&head) else {
            continue;
        };
        let k = (0..=rounds.len())
            .rev()
            .find(|&k| {
                let t = render_thoughts(rounds[..k].iter().map(|r| r.thought.as_str()));
                rest.starts_with(&format!("{t}\n"))
            })
            .ok_or("prompt history is not a prefix of the episode")?;
        if k < seen {
            return Err("prompt history shrank".into());
        }
        seen = k;
    }
    Ok(())
}

/// Runs `episodes` episodes with random planners on random scripted worlds
/// and checks each one. Returns the number checked.
pub fn fuzz_protocol(episodes: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    while checked < episodes {
        let spec = WorldSpec::generate(&GenerateOptions {
            num_classes: rng.gen_range(1..6),
            train_per_class: 2,
            test_per_class: 0,
            required_len: rng.gen_range(0..4),
            dim: rng.gen_range(4..17),
            seed: rng.gen(),
        });
        let dim = spec.dim;
        let problems = spec.problems();
        let orch = Orchestrator::new(Arc::new(ScriptedWorld::new(spec).unwrap()));
        for _ in 0..50 {
            let mode = [
                PlanningMode::PickStrategy { with_hint: true },
                PlanningMode::PickStrategy { with_hint: false },
                PlanningMode::PickHint {
                    with_strategy: true,
                },
                PlanningMode::PickHint {
                    with_strategy: false,
                },
            ][rng.gen_range(0..4)];
            let variant = match rng.gen_range(0..5) {
                0 | 1 => PolicyVariant::Random,
                2 => {
                    let mut init = ChaCha8Rng::seed_from_u64(rng.gen());
                    return_learned(PolicyParams::init(dim, 4, &mut init))
                }
                3 => PolicyVariant::Scripted(
                    (0..rng.gen_range(0..6))
                        .map(|_| MetaStrategy::ALL[rng.gen_range(0..10)])
                        .collect(),
                ),
                _ => {
                    if rng.gen_bool(0.5) {
                        PolicyVariant::CoTPrompted
                    } else {
                        PolicyVariant::ToTSearch(ToTConfig::default())
                    }
                }
            };
            let policy = PlannerPolicy::new(variant, mode);
            let cfg = EpisodeConfig {
                max_rounds: rng.gen_range(0..5),
                random_skips_opening_finish: rng.gen_bool(0.5),
                ..EpisodeConfig::default()
            };
            let problem = &problems[rng.gen_range(0..problems.len())];
            let mut ep_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let record = run_episode(&orch, problem, &policy, &cfg, &mut ep_rng);
            check_episode(problem, &record, cfg.max_rounds).map_err(|e| {
                format!(
                    "{e} (policy {}, mode {mode}, rounds {})",
                    policy.variant.name(),
                    cfg.max_rounds
                )
            })?;
            checked += 1;
            if checked == episodes {
                break;
            }
        }
    }
    Ok(checked)
}

fn return_learned(policy: PolicyParams) -> PolicyVariant {
    PolicyVariant::Learned(Arc::new(coplanner::orchestrator::LearnedPolicy {
        policy,
        value: None,
        sample: true,
    }))
}

use coplanner::gateway::prompts::{
    parse_score, render_hint_prompt, render_reasoning_prompt, render_score_prompt, Aspect,
};

/// Fixed text of the hint-generation template after the slots.
pub const HINT_TEMPLATE_TAIL: &str = "Prepare one potential succeeding hint for the input based on the above strategy. The hint should be brief and begin with 'Hint: '. Do not include the thought process or the result within the hint. For example, the hint for Enumeration can be \"Hint: enumerate the options to find the correct answer. Let's start with Option (A)\".";

/// Fixed text of the one-step-reasoning template after the slots.
pub const REASONING_TEMPLATE_TAIL: &str = "Let's follow a systematic approach by considering the hint. The previous thoughts are outlined above for reference.";

/// The ten strategy instructions in canonical order.
pub const INSTRUCTIONS: [(&str, &str); 10] = [
    ("Decomposition", "Decompose the problem or the preceding step into easier-to-solve parts."),
    ("Enumeration", "Enumerate all potential candidates in the context of the given conditions and find the most promising one."),
    ("Elimination", "Eliminate options that are incorrect or have a very low possibility of being correct."),
    ("Reflection", "Review previous results and verify whether these results are correct. If not, find the error and correct it."),
    ("Finish", "Please return the selected option in JSON format."),
    ("Deductive Reasoning", "Draw a conclusion based on general truths, principles, given premises, or rules of inference."),
    ("Inductive Reasoning", "Start from a set of individual instances and generalize to arrive at a general conclusion."),
    ("Abductive Reasoning", "Make an educated guess based on the known information and verify this guess."),
    ("Analogical Reasoning", "Start from information about one system and infer information about another system based on the similarity between the two systems."),
    ("Contradiction", "Demonstrate that a statement is false by assuming it's true and then showing this leads to an impossible or absurd outcome."),
];

/// The five scoring instructions, hint aspects first.
pub const SCORE_INSTRUCTIONS: [&str; 5] = [
    "Evaluate whether the current hint is a reasonable instruction to solve the problem. 1 is unreasonable, 3 is reasonable, and 2 is unsure. Return \"The score is x\", where x is an integer from 1 to 3.",
    "Evaluate whether the current hint is relevant to the input problem. 1 is irrelevant, 3 is relevant, and 2 is unsure. Return \"The score is x\", where x is an integer from 1 to 3.",
    "Evaluate whether the current hint is easy to understand and follow. 1 is difficult to understand and follow, 3 is easy to understand and follow, and 2 is unsure. Return \"The score is x\", where x is an integer from 1 to 3.",
    "Evaluate whether the answer of the current reasoning hint is correct. 1 is incorrect, 3 is correct, and 2 is unsure. Return \"The score is x\", where x is an integer from 1 to 3.",
    "Evaluate whether the current response is consistent with the input query and the given instruction hint. 1 is inconsistent, 3 is consistent, and 2 is unsure. Return \"The score is x\", where x is an integer from 1 to 3.",
];

/// Checks rendered templates, instructions and score parsing against the
/// reference texts.
pub fn check_prompt_fidelity() -> Result<(), String> {
    let (q, t, s, h) = ("QUERY", "THOUGHTS", "STRATEGY", "SUGGESTION");
    let hint = render_hint_prompt(q, t, s);
    let want = format!(
        "Problem: {q}\nThoughts: {t}\nRefer to the given meta-strategy: {s}\n\n{HINT_TEMPLATE_TAIL}"
    );
    if hint != want {
        return Err(format!("hint template differs:\n{hint}\n---\n{want}"));
    }
    let reasoning = render_reasoning_prompt(q, t, h);
    let want = format!("Problem: {q}\nThoughts: {t}\nHint: {h}\n\n{REASONING_TEMPLATE_TAIL}");
    if reasoning != want {
        return Err(format!(
            "reasoning template differs:\n{reasoning}\n---\n{want}"
        ));
    }
    for (s, (name, text)) in MetaStrategy::ALL.iter().zip(INSTRUCTIONS) {
        if s.instruction() != text {
            return Err(format!("{name} instruction differs: {:?}", s.instruction()));
        }
        if s.display_name() != name {
            return Err(format!(
                "display name {:?}, expected {name:?}",
                s.display_name()
            ));
        }
    }
    let aspects = Aspect::HINT.iter().chain(Aspect::REASONING.iter());
    for (a, text) in aspects.zip(SCORE_INSTRUCTIONS) {
        if a.instruction() != text {
            return Err(format!("{a:?} instruction differs: {:?}", a.instruction()));
        }
        if !render_score_prompt(q, t, h, Some("R"), *a).ends_with(text) {
            return Err(format!(
                "{a:?} score prompt does not end with its instruction"
            ));
        }
    }
    for x in 1..=3u8 {
        let text = format!("The score is {x}");
        if parse_score(&text) != Some(x) || parse_score(&format!("{text}.")) != Some(x) {
            return Err(format!("'{text}' not parsed as {x}"));
        }
    }
    for bad in [
        "The score is 0",
        "The score is 4",
        "The score is 10",
        "the score is 2",
        "Score: 2",
        "The score is two",
        "",
    ] {
        if let Some(x) = parse_score(bad) {
            return Err(format!("'{bad}' parsed as {x}"));
        }
    }
    Ok(())
}

use coplanner::bc::{
    bc_pairs, collect_bc_trajectories, curriculum_filter, train_bc, BcConfig, CollectConfig,
};
use coplanner::domain::Split;
use coplanner::orchestrator::{evaluate, PpoEnv};
use coplanner::ppo::{train_ppo, PpoConfig, PpoState};

/// Result of a BC-then-PPO run on a generated world.
#[derive(Debug, Clone)]
pub struct LearningReport {
    pub test_problems: usize,
    pub random_correct: usize,
    pub random_accuracy: f64,
    pub bc_accuracy: f64,
    /// Greedy accuracy of the policy after the last update within the
    /// step budget.
    pub ppo_accuracy: f64,
    pub env_steps: u64,
    pub updates: u64,
    pub ppo_problems: usize,
}

/// Collects random trajectories, clones the successful ones, fine-tunes with
/// PPO on the filtered training problems and evaluates on the test split,
/// all with default hyperparameters.
pub fn learning_pipeline(world_seed: u64, seed: u64) -> Result<LearningReport, String> {
    let spec = WorldSpec::generate(&GenerateOptions {
        seed: world_seed,
        ..GenerateOptions::default()
    });
    let dim = spec.dim;
    let train = spec.problems_in(Split::Train);
    let test = spec.problems_in(Split::Test);
    let orch = Orchestrator::new(Arc::new(
        ScriptedWorld::new(spec).map_err(|e| e.to_string())?,
    ));
    let ecfg = EpisodeConfig {
        record_exchanges: false,
        ..EpisodeConfig::default()
    };
    let e = |e: coplanner::Error| e.to_string();

    let (episodes, difficulty) =
        collect_bc_trajectories(&orch, &train, &CollectConfig::default(), &ecfg, seed)
            .map_err(e)?;
    let pairs = bc_pairs(&episodes);
    let bc = BcConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let init = PolicyParams::init(dim, bc.hidden, &mut rng);
    let cloned = train_bc(&pairs, init, &bc, seed ^ 2).map_err(e)?;

    let kept = curriculum_filter(&difficulty, 0.05, 0.90);
    let pool: Vec<Problem> = train.into_iter().filter(|p| kept.contains(&p.id)).collect();
    if pool.is_empty() {
        return Err("curriculum filter left no problems".into());
    }
    let ppo_problems = pool.len();
    let value = coplanner::nets::ValueParams::init(dim, bc.hidden, &mut rng);
    let mut state = PpoState::new(cloned.params.clone(), value, seed ^ 3);
    let env = PpoEnv::new(&orch, pool, ecfg.clone(), seed ^ 4);
    let cfg = PpoConfig::default();
    let mut within_budget = (state.policy.clone(), 0u64, 0u64);
    train_ppo(&env, &mut state, &cfg, |st, _, _| {
        if st.env_steps <= cfg.total_env_steps {
            within_budget = (st.policy.clone(), st.env_steps, st.updates);
        }
        Ok(())
    })
    .map_err(e)?;

    let greedy = |p: PolicyParams| PlannerPolicy::learned(p, None, false);
    let random = evaluate(&orch, &test, &PlannerPolicy::random(), &ecfg, seed ^ 5).map_err(e)?;
    let bc_eval = evaluate(&orch, &test, &greedy(cloned.params), &ecfg, 0).map_err(e)?;
    let ppo_eval = evaluate(&orch, &test, &greedy(within_budget.0), &ecfg, 0).map_err(e)?;
    Ok(LearningReport {
        test_problems: test.len(),
        random_correct: random.correct,
        random_accuracy: random.accuracy,
        bc_accuracy: bc_eval.accuracy,
        ppo_accuracy: ppo_eval.accuracy,
        env_steps: within_budget.1,
        updates: within_budget.2,
        ppo_problems,
    })
}

use std::path::Path;

/// Runs the command line in-process and returns its exit status.
pub fn cli(args: &[&str]) -> i32 {
    coplanner::cli::run(std::iter::once("coplanner").chain(args.iter().copied()))
}

/// Overrides that shrink every stage to a few seconds.
pub const SMALL: [&str; 6] = [
    "collect.samples_per_problem=8",
    "bc.steps=300",
    "bc.eval_every=50",
    "ppo.total_env_steps=600",
    "ppo.warmup_freeze_steps=100",
    "training.checkpoint_every=3",
];

/// Writes a small generated scenario into `dir` and returns its path.
pub fn small_world(dir: &Path) -> String {
    let path = dir.join("world.json");
    let p = path.to_str().unwrap().to_string();
    let code = cli(&[
        "gen-world",
        "--output",
        &p,
        "--classes",
        "4",
        "--train-per-class",
        "6",
        "--test-per-class",
        "5",
        "--dim",
        "24",
        "--seed",
        "3",
    ]);
    assert_eq!(code, 0);
    p
}

/// Common arguments for a run in `out` on `world`, followed by `extra`.
pub fn run_args(out: &Path, world: &str, seed: u64, extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "--out".into(),
        out.to_str().unwrap().into(),
        "--scenario".into(),
        world.into(),
        "--seed".into(),
        seed.to_string(),
    ];
    for s in SMALL.iter().chain(extra) {
        v.push("--set".into());
        v.push((*s).into());
    }
    v
}

/// collect-bc, train-bc, train-ppo and eval in `out`.
pub fn cli_pipeline(out: &Path, world: &str, seed: u64, extra: &[&str]) -> Result<(), String> {
    let common = run_args(out, world, seed, extra);
    let steps: [&[&str]; 4] = [
        &["collect-bc"],
        &["train-bc"],
        &["train-ppo"],
        &["eval", "--policy", "random,learned,cot", "--rounds", "1,2"],
    ];
    for step in steps {
        let mut args: Vec<&str> = step.to_vec();
        args.extend(common.iter().map(String::as_str));
        let code = cli(&args);
        if code != 0 {
            return Err(format!("{} exited with {code}", step[0]));
        }
    }
    Ok(())
}

/// Files that must match byte for byte between two runs with one seed.
pub const DETERMINISTIC_ARTIFACTS: [&str; 5] = [
    "difficulty.csv",
    "metrics.csv",
    "eval-summary.csv",
    "bc.ckpt.json",
    "ppo.ckpt.json",
];

pub fn compare_runs(a: &Path, b: &Path) -> Result<(), String> {
    for name in DETERMINISTIC_ARTIFACTS {
        let x = std::fs::read(a.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let y = std::fs::read(b.join(name)).map_err(|e| format!("{name}: {e}"))?;
        if x != y {
            return Err(format!("{name} differs between runs"));
        }
    }
    Ok(())
}
