//! Deterministic scripted backend.
//!
//! Each problem carries a hidden required strategy sequence. The scripted
//! reasoner makes progress only when the hints it receives name those
//! strategies in order from the first round, and it answers correctly at
//! Finish only if the whole sequence was followed. Thoughts carry a marker
//! ([`MARK_PROGRESS`], [`MARK_STALLED`], [`MARK_DONE`]) so later prompts can
//! recover the progress made so far from the rendered history alone: every
//! response is a pure function of the request.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prompts::{
    Aspect, COT_PREAMBLE, FREE_HINT_INSTRUCTION, HINT_INSTRUCTION, JSON_ANSWER_INSTRUCTION,
    REASONING_INSTRUCTION, STRATEGY_SELECTION_INSTRUCTION,
};
use super::{Backend, EmbeddingVector, GatewayError, GenerationRequest};
use crate::domain::{render_query, AnswerOption, Problem, Split};
use crate::strategy::MetaStrategy;

pub const MARK_PROGRESS: &str = "[progress]";
pub const MARK_STALLED: &str = "[stalled]";
pub const MARK_DONE: &str = "[done]";

/// A problem and the strategy sequence that solves it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRule {
    pub problem: Problem,
    pub required: Vec<MetaStrategy>,
}

/// Serializable scenario describing a scripted world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub embedding_seed: u64,
    pub problems: Vec<ProblemRule>,
    /// Whether direct / few-shot / chain-of-thought prompts are answered
    /// correctly.
    #[serde(default)]
    pub prompt_baselines_correct: bool,
    /// Prompts longer than this are rejected as context overflows.
    #[serde(default)]
    pub max_prompt_chars: Option<usize>,
    /// Fixed answer of the prompted strategy selector; hash-derived if unset.
    #[serde(default)]
    pub cot_policy_choice: Option<MetaStrategy>,
}

fn default_dim() -> usize {
    64
}

/// Parameters for [`WorldSpec::generate`].
#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Length of each class's required sequence.
    pub required_len: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            num_classes: 10,
            train_per_class: 8,
            test_per_class: 10,
            required_len: 1,
            dim: 64,
            seed: 0,
        }
    }
}

const TOPIC_WORDS: [&str; 60] = [
    "merchant", "coin", "harbor", "lantern", "orchard", "glacier", "violin", "compass", "falcon",
    "granary", "quarry", "monsoon", "tapestry", "beacon", "caravan", "ember", "meadow", "citadel",
    "ferry", "prism", "saddle", "thistle", "anvil", "bramble", "cobalt", "dune", "estuary",
    "furnace", "gazebo", "hamlet", "ivory", "juniper", "kiln", "lagoon", "mosaic", "nectar",
    "obelisk", "pagoda", "quiver", "rampart", "sextant", "tundra", "umber", "vessel", "willow",
    "yarrow", "zephyr", "atlas", "bastion", "cinder", "delta", "echo", "fjord", "garnet", "heron",
    "isthmus", "jasper", "kestrel", "lichen", "marrow",
];

const NON_FINISH: [MetaStrategy; 9] = [
    MetaStrategy::Decomposition,
    MetaStrategy::Enumeration,
    MetaStrategy::Elimination,
    MetaStrategy::Reflection,
    MetaStrategy::Deduction,
    MetaStrategy::Induction,
    MetaStrategy::Abduction,
    MetaStrategy::Analogy,
    MetaStrategy::Contradiction,
];

impl WorldSpec {
    /// Builds a world of `num_classes` problem classes. Problems in a class
    /// share their topic words and their required strategy sequence; the
    /// first required strategy cycles through the non-Finish strategies.
    pub fn generate(opts: &GenerateOptions) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut problems = Vec::new();
        for class in 0..opts.num_classes {
            let w = |k: usize| TOPIC_WORDS[(6 * class + k) % TOPIC_WORDS.len()];
            let words: Vec<&str> = (0..6).map(w).collect();
            let required: Vec<MetaStrategy> = (0..opts.required_len)
                .map(|i| {
                    if i == 0 {
                        NON_FINISH[class % NON_FINISH.len()]
                    } else {
                        NON_FINISH[rng.gen_range(0..NON_FINISH.len())]
                    }
                })
                .collect();
            let total = opts.train_per_class + opts.test_per_class;
            for k in 0..total {
                let split = if k < opts.train_per_class {
                    Split::Train
                } else {
                    Split::Test
                };
                let question = format!(
                    "{} case {k}: which account of the {} {} holds?",
                    words.join(" "),
                    words[0],
                    words[1]
                );
                let options = vec![
                    AnswerOption {
                        label: 'A',
                        text: format!("{} {}", words[0], words[1]),
                    },
                    AnswerOption {
                        label: 'B',
                        text: format!("{} {}", words[2], words[3]),
                    },
                    AnswerOption {
                        label: 'C',
                        text: format!("{} {}", words[4], words[5]),
                    },
                    AnswerOption {
                        label: 'D',
                        text: "none".into(),
                    },
                ];
                let gold = (b'A' + rng.gen_range(0..4u8)) as char;
                let problem = Problem::new(format!("c{class}-{k}"), question, options, gold, split)
                    .expect("generated problem is valid");
                problems.push(ProblemRule {
                    problem,
                    required: required.clone(),
                });
            }
        }
        WorldSpec {
            dim: opts.dim,
            embedding_seed: opts.seed,
            problems,
            prompt_baselines_correct: false,
            max_prompt_chars: None,
            cot_policy_choice: None,
        }
    }

    pub fn problems(&self) -> Vec<Problem> {
        self.problems.iter().map(|r| r.problem.clone()).collect()
    }

    pub fn problems_in(&self, split: Split) -> Vec<Problem> {
        self.problems
            .iter()
            .filter(|r| r.problem.split == split)
            .map(|r| r.problem.clone())
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Scenario(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| GatewayError::Scenario(format!("{}: {e}", path.display())))
    }
}

/// The scripted backend built from a [`WorldSpec`].
#[derive(Debug, Clone)]
pub struct ScriptedWorld {
    spec: WorldSpec,
    by_query: HashMap<String, usize>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn slot<'a>(prompt: &'a str, start: &str, ends: &[&str]) -> Option<&'a str> {
    let from = prompt.find(start)? + start.len();
    let rest = &prompt[from..];
    let end = ends
        .iter()
        .filter_map(|e| rest.find(e))
        .min()
        .unwrap_or(rest.len());
    Some(&rest[..end])
}

struct Progress {
    achieved: usize,
    stalled: bool,
}

impl ScriptedWorld {
    pub fn new(spec: WorldSpec) -> Result<Self, GatewayError> {
        if spec.dim == 0 {
            return Err(GatewayError::Scenario(
                "embedding dimension must be positive".into(),
            ));
        }
        let mut by_query = HashMap::new();
        for (i, rule) in spec.problems.iter().enumerate() {
            if rule.required.contains(&MetaStrategy::Finish) {
                return Err(GatewayError::Scenario(format!(
                    "problem {} lists Finish in its required sequence",
                    rule.problem.id
                )));
            }
            if by_query.insert(render_query(&rule.problem), i).is_some() {
                return Err(GatewayError::Scenario(format!(
                    "problem {} duplicates another problem's text",
                    rule.problem.id
                )));
            }
        }
        Ok(ScriptedWorld { spec, by_query })
    }

    pub fn from_path(path: &Path) -> Result<Self, GatewayError> {
        Self::new(WorldSpec::load(path)?)
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    fn rule_for_query(&self, query: &str) -> Result<&ProblemRule, GatewayError> {
        self.by_query
            .get(query)
            .map(|&i| &self.spec.problems[i])
            .ok_or_else(|| GatewayError::Scenario("prompt refers to an unknown problem".into()))
    }

    /// Problem of a planner/reasoner prompt (`Problem: .. \nThoughts: ..`).
    fn agent_rule(&self, prompt: &str) -> Result<&ProblemRule, GatewayError> {
        let query = slot(prompt, "Problem: ", &["\nThoughts: "])
            .ok_or_else(|| GatewayError::Scenario("prompt has no problem slot".into()))?;
        self.rule_for_query(query)
    }

    /// Problem of a prompt baseline: the last `Problem:` block.
    fn baseline_rule(&self, prompt: &str) -> Result<&ProblemRule, GatewayError> {
        let start = prompt
            .rfind("Problem: ")
            .ok_or_else(|| GatewayError::Scenario("prompt has no problem slot".into()))?;
        let query = slot(&prompt[start..], "Problem: ", &["\n\n"]).unwrap_or_default();
        self.rule_for_query(query)
    }

    fn progress(prompt: &str) -> Progress {
        let thoughts = slot(
            prompt,
            "\nThoughts: ",
            &["\nHint: ", "\nRefer to the given meta-strategy: ", "\n\n"],
        )
        .unwrap_or_default();
        let achieved = thoughts.matches(MARK_PROGRESS).count();
        let stalled = thoughts.contains(MARK_STALLED);
        Progress { achieved, stalled }
    }

    fn solved(rule: &ProblemRule, p: &Progress) -> bool {
        !p.stalled && p.achieved >= rule.required.len()
    }

    fn next_required(rule: &ProblemRule, p: &Progress) -> Option<MetaStrategy> {
        if p.stalled {
            None
        } else {
            rule.required.get(p.achieved).copied()
        }
    }

    fn wrong_label(problem: &Problem) -> char {
        let n = problem.options.len() as u8;
        let gold = problem.gold_label as u8 - b'A';
        (b'A' + (gold + 1) % n) as char
    }

    fn answer_json(problem: &Problem, correct: bool) -> String {
        let label = if correct {
            problem.gold_label
        } else {
            Self::wrong_label(problem)
        };
        format!(
            "Based on the previous thoughts, the selected option is ({label}).\n{{\"answer\": \"{label}\"}}"
        )
    }

    fn variant(req: &GenerationRequest) -> u64 {
        let mut key = req.prompt.as_bytes().to_vec();
        if req.temperature > 0.0 {
            key.extend_from_slice(&req.seed.unwrap_or(0).to_le_bytes());
            key.extend_from_slice(&req.temperature.to_bits().to_le_bytes());
        }
        fnv1a(&key)
    }

    fn hint_for(strategy: MetaStrategy, variant: Option<u64>) -> String {
        let mut hint = format!(
            "Hint: Use {}: {}",
            strategy.display_name(),
            strategy.instruction()
        );
        if let Some(v) = variant {
            hint.push_str(&format!(" Focus on detail {}.", v % 7));
        }
        hint
    }

    fn respond_hint(&self, req: &GenerationRequest) -> Result<String, GatewayError> {
        self.agent_rule(&req.prompt)?;
        let strategy_text =
            slot(&req.prompt, "Refer to the given meta-strategy: ", &["\n\n"]).unwrap_or_default();
        let strategy = MetaStrategy::identify(strategy_text).ok_or_else(|| {
            GatewayError::Scenario("hint prompt names no known meta-strategy".into())
        })?;
        let variant = (req.temperature > 0.0).then(|| Self::variant(req));
        Ok(Self::hint_for(strategy, variant))
    }

    fn respond_free_hint(&self, req: &GenerationRequest) -> Result<String, GatewayError> {
        self.agent_rule(&req.prompt)?;
        let v = Self::variant(req);
        let strategy = NON_FINISH[(v % NON_FINISH.len() as u64) as usize];
        Ok(Self::hint_for(
            strategy,
            (req.temperature > 0.0).then_some(v / 9),
        ))
    }

    fn respond_reasoning(&self, req: &GenerationRequest) -> Result<String, GatewayError> {
        let rule = self.agent_rule(&req.prompt)?;
        let hint = slot(&req.prompt, "\nHint: ", &["\n\n"]).unwrap_or_default();
        let progress = Self::progress(&req.prompt);
        let strategy = MetaStrategy::identify(hint);
        if strategy == Some(MetaStrategy::Finish) {
            return Ok(Self::answer_json(
                &rule.problem,
                Self::solved(rule, &progress),
            ));
        }
        let name = strategy.map_or("the given", |s| s.display_name());
        let thought = if progress.stalled {
            format!("{MARK_STALLED} Applying {name} does not repair the earlier misstep.")
        } else if progress.achieved >= rule.required.len() {
            format!("{MARK_DONE} The argument is already settled and {name} confirms it.")
        } else if strategy == Self::next_required(rule, &progress) {
            format!("{MARK_PROGRESS} Applying {name} settles part of the argument.")
        } else {
            format!("{MARK_STALLED} Applying {name} leads nowhere; the argument stays open.")
        };
        Ok(thought)
    }

    fn respond_selection(&self, req: &GenerationRequest) -> Result<String, GatewayError> {
        self.agent_rule(&req.prompt)?;
        let choice = self
            .spec
            .cot_policy_choice
            .unwrap_or_else(|| NON_FINISH[(Self::variant(req) % NON_FINISH.len() as u64) as usize]);
        Ok(format!(
            "I choose {} because it fits the current state of the argument.",
            choice.name()
        ))
    }

    fn respond_score(&self, req: &GenerationRequest) -> Result<String, GatewayError> {
        let rule = self.agent_rule(&req.prompt)?;
        let hint = slot(&req.prompt, "\nHint: ", &["\nResponse: ", "\n\n"]).unwrap_or_default();
        let progress = Self::progress(&req.prompt);
        let good = !progress.stalled
            && match Self::next_required(rule, &progress) {
                Some(next) => MetaStrategy::identify(hint) == Some(next),
                None => true,
            };
        let clarity = req.prompt.contains(&Aspect::Clarity.instruction());
        let score = match (clarity, good) {
            (true, _) => 2,
            (false, true) => 3,
            (false, false) => 1,
        };
        Ok(format!("The score is {score}."))
    }

    fn respond_baseline(&self, req: &GenerationRequest) -> Result<String, GatewayError> {
        let rule = self.baseline_rule(&req.prompt)?;
        let answer = Self::answer_json(&rule.problem, self.spec.prompt_baselines_correct);
        if req.prompt.contains(COT_PREAMBLE) {
            Ok(format!(
                "Step 1: compare the statements in the records. Step 2: check each option.\n{answer}"
            ))
        } else {
            Ok(answer)
        }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.spec.embedding_seed);
        (0..self.spec.dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect()
    }
}

impl Backend for ScriptedWorld {
    fn generate(&self, req: &GenerationRequest) -> Result<String, GatewayError> {
        req.validate()?;
        if let Some(limit) = self.spec.max_prompt_chars {
            if req.prompt.chars().count() > limit {
                return Err(GatewayError::ContextOverflow(format!(
                    "prompt of {} chars exceeds limit {limit}",
                    req.prompt.chars().count()
                )));
            }
        }
        let p = &req.prompt;
        if p.contains(HINT_INSTRUCTION) {
            self.respond_hint(req)
        } else if p.contains(FREE_HINT_INSTRUCTION) {
            self.respond_free_hint(req)
        } else if p.contains("Return \"The score is x\"") {
            self.respond_score(req)
        } else if p.contains(REASONING_INSTRUCTION) {
            self.respond_reasoning(req)
        } else if p.contains(STRATEGY_SELECTION_INSTRUCTION) {
            self.respond_selection(req)
        } else if p.contains(JSON_ANSWER_INSTRUCTION) || p.contains("answer in JSON format") {
            self.respond_baseline(req)
        } else {
            Ok("I am not sure how to respond to this request.".into())
        }
    }

    /// Mean of per-token pseudo-random vectors, scaled to unit length.
    fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        if text.is_empty() {
            return Err(GatewayError::InvalidRequest("empty text".into()));
        }
        let lowered = text.to_lowercase();
        let mut tokens: Vec<&str> = lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            tokens.push(text);
        }
        let mut acc = vec![0.0; self.spec.dim];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|a| *a /= norm);
        }
        EmbeddingVector::new(acc)
    }

    fn embedding_dim(&self) -> Result<usize, GatewayError> {
        Ok(self.spec.dim)
    }

    fn identity(&self) -> String {
        let digest = fnv1a(
            serde_json::to_string(&self.spec)
                .unwrap_or_default()
                .as_bytes(),
        );
        format!(
            "mock:scripted-world dim={} problems={} digest={digest:016x}",
            self.spec.dim,
            self.spec.problems.len()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::render_thoughts;
    use crate::gateway::prompts::{render_hint_prompt, render_reasoning_prompt, strategy_slot};

    fn world() -> ScriptedWorld {
        let spec = WorldSpec::generate(&GenerateOptions {
            num_classes: 2,
            train_per_class: 2,
            test_per_class: 1,
            required_len: 2,
            ..Default::default()
        });
        ScriptedWorld::new(spec).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let w = world();
        let p = &w.spec().problems[0].problem;
        let prompt = render_hint_prompt(
            &render_query(p),
            "",
            &strategy_slot(MetaStrategy::Deduction),
        );
        let req = GenerationRequest::greedy(prompt);
        assert_eq!(w.generate(&req).unwrap(), w.generate(&req).unwrap());
        assert!(w.generate(&req).unwrap().contains("Deductive Reasoning"));
    }

    #[test]
    fn required_sequence_drives_progress_and_answer() {
        let w = world();
        let rule = &w.spec().problems[0];
        let q = render_query(&rule.problem);
        let mut thoughts: Vec<String> = Vec::new();
        for s in &rule.required {
            let hint = w
                .generate(&GenerationRequest::greedy(render_hint_prompt(
                    &q,
                    "",
                    &strategy_slot(*s),
                )))
                .unwrap();
            let t = render_thoughts(thoughts.iter().map(String::as_str));
            let thought = w
                .generate(&GenerationRequest::greedy(render_reasoning_prompt(
                    &q, &t, &hint,
                )))
                .unwrap();
            assert!(thought.contains(MARK_PROGRESS), "{thought}");
            thoughts.push(thought);
        }
        let t = render_thoughts(thoughts.iter().map(String::as_str));
        let fin = w
            .generate(&GenerationRequest::greedy(render_reasoning_prompt(
                &q,
                &t,
                MetaStrategy::Finish.instruction(),
            )))
            .unwrap();
        let labels = rule.problem.labels();
        assert_eq!(
            crate::gateway::prompts::extract_answer(&fin, &labels),
            Some(rule.problem.gold_label)
        );
    }

    #[test]
    fn wrong_first_strategy_stalls() {
        let w = world();
        let rule = &w.spec().problems[0];
        let wrong = NON_FINISH.iter().find(|s| **s != rule.required[0]).unwrap();
        let q = render_query(&rule.problem);
        let thought = w
            .generate(&GenerationRequest::greedy(render_reasoning_prompt(
                &q,
                "",
                &format!("Use {}", wrong.display_name()),
            )))
            .unwrap();
        assert!(thought.contains(MARK_STALLED));
    }

    #[test]
    fn embeddings_are_deterministic_and_distinct() {
        let w = world();
        let a = w.embed("some text").unwrap();
        assert_eq!(a, w.embed("some text").unwrap());
        assert_eq!(a.dim(), 64);
        for x in MetaStrategy::ALL {
            for y in MetaStrategy::ALL {
                if x != y {
                    let ex = w.embed(x.instruction()).unwrap();
                    let ey = w.embed(y.instruction()).unwrap();
                    let dist: f64 = ex
                        .as_slice()
                        .iter()
                        .zip(ey.as_slice())
                        .map(|(a, b)| (a - b).powi(2))
                        .sum();
                    assert!(dist > 0.0);
                }
            }
        }
    }

    #[test]
    fn context_limit_is_enforced() {
        let mut spec = world().spec().clone();
        spec.max_prompt_chars = Some(10);
        let w = ScriptedWorld::new(spec).unwrap();
        let err = w
            .generate(&GenerationRequest::greedy("x".repeat(11)))
            .unwrap_err();
        assert!(err.is_context_overflow());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = world().spec().clone();
        let text = serde_json::to_string(&spec).unwrap();
        let back: WorldSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }
}
