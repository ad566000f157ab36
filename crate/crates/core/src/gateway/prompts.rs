//! Prompt templates and completion parsers.
//!
//! The hint-generation and one-step-reasoning templates, the strategy
//! instructions and the ToT scoring prompts are fixed texts; the prompted
//! baselines (direct, few-shot, chain-of-thought, strategy selection) use
//! minimal templates of our own.

use std::collections::HashSet;

use serde::Deserialize;
use serde_json::Value;

use crate::domain::{render_query, Problem};
use crate::strategy::MetaStrategy;

pub const HINT_INSTRUCTION: &str = "Prepare one potential succeeding hint for the input based on the above strategy. The hint should be brief and begin with 'Hint: '. Do not include the thought process or the result within the hint. For example, the hint for Enumeration can be \"Hint: enumerate the options to find the correct answer. Let's start with Option (A)\".";

pub const REASONING_INSTRUCTION: &str =
    "Let's follow a systematic approach by considering the hint. The previous thoughts are outlined above for reference.";

/// Instruction for hints generated without a meta-strategy.
pub const FREE_HINT_INSTRUCTION: &str = "Prepare one potential succeeding hint for the input. The hint should be brief and begin with 'Hint: '. Do not include the thought process or the result within the hint.";

pub const JSON_ANSWER_INSTRUCTION: &str =
    "Return the answer in JSON format, e.g. {\"answer\": \"A\"}.";

pub const DIRECT_PREAMBLE: &str = "Answer the multiple-choice question.";
pub const COT_PREAMBLE: &str = "Let's think step by step.";
pub const FEW_SHOT_PREAMBLE: &str = "Here are some solved examples.";
pub const STRATEGY_SELECTION_INSTRUCTION: &str = "Select the best meta-strategy for the next reasoning step. Reply with the name of the chosen meta-strategy first, then explain briefly.";

const SCORE_SUFFIX: &str = "Return \"The score is x\", where x is an integer from 1 to 3.";

/// Hint-generation prompt: query, history and the chosen strategy.
pub fn render_hint_prompt(query: &str, thoughts: &str, strategy: &str) -> String {
    format!(
        "Problem: {query}\nThoughts: {thoughts}\nRefer to the given meta-strategy: {strategy}\n\n{HINT_INSTRUCTION}"
    )
}

/// Hint-generation prompt without a strategy slot.
pub fn render_free_hint_prompt(query: &str, thoughts: &str) -> String {
    format!("Problem: {query}\nThoughts: {thoughts}\n\n{FREE_HINT_INSTRUCTION}")
}

/// One-step reasoning prompt for the reasoning agent.
pub fn render_reasoning_prompt(query: &str, thoughts: &str, hint: &str) -> String {
    format!("Problem: {query}\nThoughts: {thoughts}\nHint: {hint}\n\n{REASONING_INSTRUCTION}")
}

/// Slot text for a strategy: display name plus instruction.
pub fn strategy_slot(strategy: MetaStrategy) -> String {
    format!("{}: {}", strategy.display_name(), strategy.instruction())
}

/// Strips a leading `Hint:` marker from a generated hint.
pub fn clean_hint(completion: &str) -> String {
    let t = completion.trim();
    let t = t.strip_prefix("Hint:").unwrap_or(t);
    t.trim().to_string()
}

/// Prompt asking the planner's language model to pick a strategy.
pub fn render_strategy_selection_prompt(query: &str, thoughts: &str) -> String {
    let mut listing = String::new();
    for s in MetaStrategy::ALL {
        listing.push_str(&format!("- {}: {}\n", s.name(), s.instruction()));
    }
    format!(
        "Problem: {query}\nThoughts: {thoughts}\n\nMeta-strategies:\n{listing}\n{STRATEGY_SELECTION_INSTRUCTION}"
    )
}

pub fn render_direct_prompt(problem: &Problem) -> String {
    format!(
        "{DIRECT_PREAMBLE}\n\nProblem: {}\n\n{JSON_ANSWER_INSTRUCTION}",
        render_query(problem)
    )
}

pub fn render_cot_prompt(problem: &Problem) -> String {
    format!(
        "{DIRECT_PREAMBLE}\n\nProblem: {}\n\n{COT_PREAMBLE} Then {}",
        render_query(problem),
        lowercase_first(JSON_ANSWER_INSTRUCTION)
    )
}

pub fn render_few_shot_prompt(problem: &Problem, demos: &[Problem]) -> String {
    let mut out = format!("{DIRECT_PREAMBLE} {FEW_SHOT_PREAMBLE}\n\n");
    for d in demos {
        out.push_str(&format!(
            "Problem: {}\nAnswer: {{\"answer\": \"{}\"}}\n\n",
            render_query(d),
            d.gold_label
        ));
    }
    out.push_str(&format!(
        "Problem: {}\n\n{JSON_ANSWER_INSTRUCTION}",
        render_query(problem)
    ));
    out
}

fn lowercase_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Self-evaluation aspects used by the tree-of-thought planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Aspect {
    Rationality,
    Relevancy,
    Clarity,
    Correctness,
    Consistency,
}

impl Aspect {
    pub const HINT: [Aspect; 3] = [Aspect::Rationality, Aspect::Relevancy, Aspect::Clarity];
    pub const REASONING: [Aspect; 2] = [Aspect::Correctness, Aspect::Consistency];

    /// Whether the aspect judges the reasoning response rather than the hint.
    pub fn needs_response(self) -> bool {
        matches!(self, Aspect::Correctness | Aspect::Consistency)
    }

    pub fn instruction(self) -> String {
        let body = match self {
            Aspect::Rationality => "Evaluate whether the current hint is a reasonable instruction to solve the problem. 1 is unreasonable, 3 is reasonable, and 2 is unsure.",
            Aspect::Relevancy => "Evaluate whether the current hint is relevant to the input problem. 1 is irrelevant, 3 is relevant, and 2 is unsure.",
            Aspect::Clarity => "Evaluate whether the current hint is easy to understand and follow. 1 is difficult to understand and follow, 3 is easy to understand and follow, and 2 is unsure.",
            Aspect::Correctness => "Evaluate whether the answer of the current reasoning hint is correct. 1 is incorrect, 3 is correct, and 2 is unsure.",
            Aspect::Consistency => "Evaluate whether the current response is consistent with the input query and the given instruction hint. 1 is inconsistent, 3 is consistent, and 2 is unsure.",
        };
        format!("{body} {SCORE_SUFFIX}")
    }
}

pub fn render_score_prompt(
    query: &str,
    thoughts: &str,
    hint: &str,
    response: Option<&str>,
    aspect: Aspect,
) -> String {
    let mut out = format!("Problem: {query}\nThoughts: {thoughts}\nHint: {hint}\n");
    if let Some(r) = response {
        out.push_str(&format!("Response: {r}\n"));
    }
    out.push('\n');
    out.push_str(&aspect.instruction());
    out
}

/// Parses `The score is x` with x in 1..=3. The first well-formed
/// occurrence wins; anything else yields `None`.
pub fn parse_score(completion: &str) -> Option<u8> {
    const KEY: &str = "The score is ";
    let mut rest = completion;
    while let Some(pos) = rest.find(KEY) {
        let tail = &rest[pos + KEY.len()..];
        let mut chars = tail.chars();
        if let Some(d @ '1'..='3') = chars.next() {
            if !chars.next().is_some_and(|c| c.is_ascii_digit()) {
                return Some(d as u8 - b'0');
            }
        }
        rest = &rest[pos + KEY.len()..];
    }
    None
}

/// Extracts the answer letter from the last JSON object in `completion`
/// that has a string field named `answer` (any case).
pub fn extract_answer(completion: &str, valid_labels: &HashSet<char>) -> Option<char> {
    let mut last: Option<String> = None;
    for (i, _) in completion.match_indices('{') {
        let mut de = serde_json::Deserializer::from_str(&completion[i..]);
        if let Ok(Value::Object(map)) = Value::deserialize(&mut de) {
            if let Some(Value::String(v)) = map
                .iter()
                .find(|(k, _)| k.eq_ignore_ascii_case("answer"))
                .map(|(_, v)| v)
            {
                last = Some(v.clone());
            }
        }
    }
    let label = normalize_label(&last?)?;
    valid_labels.contains(&label).then_some(label)
}

fn normalize_label(raw: &str) -> Option<char> {
    let mut s = raw.trim();
    for prefix in ["option", "answer"] {
        if s.get(..prefix.len())
            .is_some_and(|h| h.eq_ignore_ascii_case(prefix))
        {
            s = s[prefix.len()..].trim_start_matches(|c: char| c.is_whitespace() || c == ':');
        }
    }
    let s = s.trim_matches(|c: char| !c.is_ascii_alphanumeric());
    let mut chars = s.chars();
    let first = chars.next()?;
    if !first.is_ascii_alphabetic() {
        return None;
    }
    match chars.next() {
        None => Some(first.to_ascii_uppercase()),
        Some(c) if !c.is_ascii_alphanumeric() => Some(first.to_ascii_uppercase()),
        Some(_) => None,
    }
}
