//! Core data model: problems, dialogue states, rounds, transitions and
//! episode records.

use std::collections::HashSet;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategy::MetaStrategy;

/// Dataset partition a problem belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One labelled answer option.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: char,
    pub text: String,
}

/// A multiple-choice reasoning problem.
///
/// The JSON Lines form uses the keys `id`, `question`, `options`, `gold` and
/// `split`; construction through [`Problem::new`] or deserialization both run
/// the same validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawProblem", into = "RawProblem")]
pub struct Problem {
    pub id: String,
    pub question: String,
    pub options: Vec<AnswerOption>,
    pub gold_label: char,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct RawProblem {
    id: String,
    question: String,
    options: Vec<AnswerOption>,
    gold: char,
    split: Split,
}

impl TryFrom<RawProblem> for Problem {
    type Error = Error;

    fn try_from(raw: RawProblem) -> Result<Self> {
        Problem::new(raw.id, raw.question, raw.options, raw.gold, raw.split)
    }
}

impl From<Problem> for RawProblem {
    fn from(p: Problem) -> Self {
        RawProblem {
            id: p.id,
            question: p.question,
            options: p.options,
            gold: p.gold_label,
            split: p.split,
        }
    }
}

impl Problem {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        options: Vec<AnswerOption>,
        gold_label: char,
        split: Split,
    ) -> Result<Self> {
        let id = id.into();
        if options.len() < 2 {
            return Err(Error::InvalidProblem {
                id,
                reason: format!("needs at least 2 options, got {}", options.len()),
            });
        }
        if options.len() > 26 {
            return Err(Error::InvalidProblem {
                id,
                reason: "more than 26 options".into(),
            });
        }
        for (i, opt) in options.iter().enumerate() {
            let expected = (b'A' + i as u8) as char;
            if opt.label != expected {
                return Err(Error::InvalidProblem {
                    id,
                    reason: format!(
                        "option labels must run contiguously from 'A'; position {i} has '{}'",
                        opt.label
                    ),
                });
            }
        }
        let gold_label = gold_label.to_ascii_uppercase();
        if !options.iter().any(|o| o.label == gold_label) {
            return Err(Error::InvalidProblem {
                id,
                reason: format!("gold label '{gold_label}' is not an option label"),
            });
        }
        Ok(Problem {
            id,
            question: question.into(),
            options,
            gold_label,
            split,
        })
    }

    pub fn labels(&self) -> HashSet<char> {
        self.options.iter().map(|o| o.label).collect()
    }
}

/// Reads problems from a JSON Lines file. Blank lines are skipped.
pub fn load_problems(path: &Path) -> Result<Vec<Problem>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut problems = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Problem = serde_json::from_str(&line).map_err(|e| Error::Parse {
            what: format!("{}:{}", path.display(), lineno + 1),
            reason: e.to_string(),
        })?;
        problems.push(p);
    }
    Ok(problems)
}

/// One planner decision and the reasoner's response to it.
///
/// `strategy` is `None` only for hints produced without a meta-strategy (the
/// unconditioned pick-hint ablation). For a Finish round `hint` is empty and
/// `thought` holds the final-answer completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub strategy: Option<MetaStrategy>,
    pub hint: String,
    pub thought: String,
}

impl RoundRecord {
    pub fn is_finish(&self) -> bool {
        self.strategy == Some(MetaStrategy::Finish)
    }
}

/// The planner's observation: the problem plus the ordered reasoning history.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueState {
    problem: Problem,
    rounds: Vec<RoundRecord>,
}

impl DialogueState {
    pub fn new(problem: Problem) -> Self {
        DialogueState {
            problem,
            rounds: Vec::new(),
        }
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    pub fn round_index(&self) -> usize {
        self.rounds.len()
    }

    /// Appends a completed round and returns the new state. The receiver is
    /// left untouched, so earlier snapshots stay valid.
    pub fn with_round(&self, round: RoundRecord) -> Self {
        let mut next = self.clone();
        next.rounds.push(round);
        next
    }

    pub fn push(&mut self, round: RoundRecord) {
        self.rounds.push(round);
    }

    /// True when `self`'s history is a prefix of `other`'s.
    pub fn is_prefix_of(&self, other: &DialogueState) -> bool {
        self.problem == other.problem
            && self.rounds.len() <= other.rounds.len()
            && self.rounds.iter().zip(&other.rounds).all(|(a, b)| a == b)
    }
}

// Continuation lines of multi-line values are indented by two spaces so a
// line starting at column 0 is always a structural header. This keeps the
// rendering injective.
fn indent_continuations(text: &str) -> String {
    text.replace('\n', "\n  ")
}

/// Renders the question and options (the `[query]` prompt slot).
pub fn render_query(problem: &Problem) -> String {
    let mut out = format!(
        "Question: {}\nOptions:",
        indent_continuations(&problem.question)
    );
    for opt in &problem.options {
        out.push_str(&format!(
            "\n({}) {}",
            opt.label,
            indent_continuations(&opt.text)
        ));
    }
    out
}

/// Renders the reasoning history (the `[thoughts]` prompt slot). Empty when
/// there is no history.
pub fn render_thoughts<'a>(thoughts: impl IntoIterator<Item = &'a str>) -> String {
    thoughts
        .into_iter()
        .enumerate()
        .map(|(i, t)| format!("Thought {}: {}", i + 1, indent_continuations(t)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Full textual form of a state, used for embedding.
pub fn state_render(state: &DialogueState) -> String {
    let query = render_query(&state.problem);
    let thoughts = render_thoughts(state.rounds.iter().map(|r| r.thought.as_str()));
    if thoughts.is_empty() {
        query
    } else {
        format!("{query}\n{thoughts}")
    }
}

/// Exact-match grading on option letters, ignoring case.
pub fn answer_match(extracted: Option<char>, gold: char) -> bool {
    extracted.is_some_and(|c| c.eq_ignore_ascii_case(&gold))
}

/// Terminal reward convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardScheme {
    /// +1 for a correct answer, -1 otherwise.
    #[default]
    Pm1,
    /// 1 for a correct answer, 0 otherwise.
    ZeroOne,
}

impl RewardScheme {
    pub fn reward(self, correct: bool) -> f64 {
        match (self, correct) {
            (_, true) => 1.0,
            (RewardScheme::Pm1, false) => -1.0,
            (RewardScheme::ZeroOne, false) => 0.0,
        }
    }
}

impl fmt::Display for RewardScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewardScheme::Pm1 => f.write_str("pm1"),
            RewardScheme::ZeroOne => f.write_str("zero-one"),
        }
    }
}

/// One planner decision as seen by the learner.
///
/// `action_embeddings` holds one row per candidate. Forced Finish decisions
/// have a single candidate and a log-probability of zero. Embeddings are
/// empty for policies that never look at them (prompted baselines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs_embedding: Vec<f64>,
    pub action_embeddings: Vec<Vec<f64>>,
    pub action_index: usize,
    pub log_prob: f64,
    pub value_estimate: f64,
    pub reward: f64,
    pub done: bool,
}

impl Transition {
    pub fn num_candidates(&self) -> usize {
        self.action_embeddings.len()
    }

    pub fn has_embeddings(&self) -> bool {
        !self.obs_embedding.is_empty()
    }
}

/// A single prompt/completion pair issued during an episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub role: String,
    pub prompt: String,
    pub completion: String,
}

/// Anomalies observed while running an episode.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeFlags {
    /// The final completion held no extractable answer.
    pub malformed: bool,
    /// A backend call failed and the episode was abandoned.
    pub failed: bool,
    /// Oldest thoughts were dropped to fit the backend context.
    pub truncated: bool,
    /// A prompted planner fell back to a random choice.
    pub fallback: bool,
    /// A ToT score could not be parsed and defaulted to 2.
    pub unparsed_score: bool,
}

/// Full trajectory of one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub problem_id: String,
    pub gold_label: char,
    pub transitions: Vec<Transition>,
    pub rounds: Vec<RoundRecord>,
    pub extracted_answer: Option<char>,
    pub correct: bool,
    pub reward: f64,
    #[serde(default)]
    pub flags: EpisodeFlags,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub exchanges: Vec<Exchange>,
    #[serde(default)]
    pub elapsed_ms: f64,
}

impl EpisodeRecord {
    /// Number of non-Finish reasoning rounds.
    pub fn reasoning_rounds(&self) -> usize {
        self.rounds.iter().filter(|r| !r.is_finish()).count()
    }
}
