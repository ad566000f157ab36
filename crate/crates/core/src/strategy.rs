//! The fixed pool of meta-strategies the planner chooses from.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::DialogueState;

/// A generic problem-solving move. The discriminant order is the canonical
/// action order and must not change: trained checkpoints index into it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetaStrategy {
    Decomposition,
    Enumeration,
    Elimination,
    Reflection,
    Finish,
    Deduction,
    Induction,
    Abduction,
    Analogy,
    Contradiction,
}

use MetaStrategy::*;

/// Number of strategies in the pool.
pub const NUM_STRATEGIES: usize = 10;

const CANONICAL: [MetaStrategy; NUM_STRATEGIES] = [
    Decomposition,
    Enumeration,
    Elimination,
    Reflection,
    Finish,
    Deduction,
    Induction,
    Abduction,
    Analogy,
    Contradiction,
];

impl MetaStrategy {
    pub const ALL: [MetaStrategy; NUM_STRATEGIES] = CANONICAL;

    /// Verbatim instruction handed to the hint generator.
    pub fn instruction(self) -> &'static str {
        match self {
            Decomposition => "Decompose the problem or the preceding step into easier-to-solve parts.",
            Enumeration => "Enumerate all potential candidates in the context of the given conditions and find the most promising one.",
            Elimination => "Eliminate options that are incorrect or have a very low possibility of being correct.",
            Reflection => "Review previous results and verify whether these results are correct. If not, find the error and correct it.",
            Finish => "Please return the selected option in JSON format.",
            Deduction => "Draw a conclusion based on general truths, principles, given premises, or rules of inference.",
            Induction => "Start from a set of individual instances and generalize to arrive at a general conclusion.",
            Abduction => "Make an educated guess based on the known information and verify this guess.",
            Analogy => "Start from information about one system and infer information about another system based on the similarity between the two systems.",
            Contradiction => "Demonstrate that a statement is false by assuming it's true and then showing this leads to an impossible or absurd outcome.",
        }
    }

    /// Stable identifier used in checkpoints and logs.
    pub fn name(self) -> &'static str {
        match self {
            Decomposition => "Decomposition",
            Enumeration => "Enumeration",
            Elimination => "Elimination",
            Reflection => "Reflection",
            Finish => "Finish",
            Deduction => "Deduction",
            Induction => "Induction",
            Abduction => "Abduction",
            Analogy => "Analogy",
            Contradiction => "Contradiction",
        }
    }

    /// Human-facing label used inside prompts.
    pub fn display_name(self) -> &'static str {
        match self {
            Deduction => "Deductive Reasoning",
            Induction => "Inductive Reasoning",
            Abduction => "Abductive Reasoning",
            Analogy => "Analogical Reasoning",
            other => other.name(),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        CANONICAL.get(i).copied()
    }

    fn aliases(self) -> &'static [&'static str] {
        match self {
            Decomposition => &["decomposition", "decompose"],
            Enumeration => &["enumeration", "enumerate"],
            Elimination => &["elimination", "eliminate"],
            Reflection => &["reflection", "reflect"],
            Finish => &["finish"],
            Deduction => &["deduction", "deductive"],
            Induction => &["induction", "inductive"],
            Abduction => &["abduction", "abductive"],
            Analogy => &["analogy", "analogical"],
            Contradiction => &["contradiction"],
        }
    }

    /// Finds the strategy a free-text message refers to.
    ///
    /// A verbatim instruction text wins over names. Otherwise the earliest
    /// word that names a strategy decides, so "Enumeration, then Reflection"
    /// yields Enumeration.
    pub fn identify(text: &str) -> Option<Self> {
        if let Some((_, s)) = CANONICAL
            .iter()
            .filter_map(|s| text.find(s.instruction()).map(|pos| (pos, *s)))
            .min_by_key(|(pos, _)| *pos)
        {
            return Some(s);
        }
        text.split(|c: char| !c.is_ascii_alphabetic())
            .filter(|w| !w.is_empty())
            .find_map(|w| {
                let w = w.to_ascii_lowercase();
                CANONICAL
                    .iter()
                    .copied()
                    .find(|s| s.aliases().contains(&w.as_str()))
            })
    }
}

impl fmt::Display for MetaStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetaStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CANONICAL
            .iter()
            .copied()
            .find(|m| m.name().eq_ignore_ascii_case(s) || m.display_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown meta-strategy '{s}'"))
    }
}

/// Ordered registry of the ten strategies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StrategyPool;

impl StrategyPool {
    pub fn entries(&self) -> &'static [MetaStrategy] {
        &CANONICAL
    }

    pub fn len(&self) -> usize {
        NUM_STRATEGIES
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn instruction_text(&self, strategy: MetaStrategy) -> &'static str {
        strategy.instruction()
    }

    /// Strategies the planner may pick in `state`. When `force_finish` is set
    /// only Finish is offered.
    pub fn candidates(&self, _state: &DialogueState, force_finish: bool) -> Vec<MetaStrategy> {
        if force_finish {
            vec![Finish]
        } else {
            CANONICAL.to_vec()
        }
    }

    /// Names in canonical order, as stored in checkpoints.
    pub fn order_names(&self) -> Vec<String> {
        CANONICAL.iter().map(|s| s.name().to_string()).collect()
    }
}
