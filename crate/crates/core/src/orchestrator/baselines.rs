use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::domain::{answer_match, EpisodeFlags, EpisodeRecord, Exchange, Problem};
use crate::error::{Error, Result};
use crate::gateway::prompts::{
    extract_answer, render_cot_prompt, render_direct_prompt, render_few_shot_prompt,
};
use crate::gateway::GenerationRequest;

use super::{EpisodeConfig, Orchestrator};

/// Index of the row with the highest mean score; the lowest index wins ties.
pub fn select_best(scores: &[Vec<u8>]) -> Option<usize> {
    let mean = |row: &Vec<u8>| {
        if row.is_empty() {
            0.0
        } else {
            row.iter().map(|&s| f64::from(s)).sum::<f64>() / row.len() as f64
        }
    };
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in scores.iter().enumerate() {
        let m = mean(row);
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((i, m));
        }
    }
    best.map(|(i, _)| i)
}

/// Single-prompt baselines without a planner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptBaseline {
    Direct,
    FewShot,
    Cot,
}

impl PromptBaseline {
    pub const ALL: [PromptBaseline; 3] = [
        PromptBaseline::Direct,
        PromptBaseline::FewShot,
        PromptBaseline::Cot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptBaseline::Direct => "direct",
            PromptBaseline::FewShot => "few-shot",
            PromptBaseline::Cot => "cot-prompt",
        }
    }
}

impl fmt::Display for PromptBaseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptBaseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptBaseline::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown prompt baseline '{s}'"))
    }
}

/// Answers `problem` with a single prompt. Few-shot needs at least one
/// demonstration.
pub fn run_prompt_baseline(
    orch: &Orchestrator,
    problem: &Problem,
    baseline: PromptBaseline,
    demos: &[Problem],
    cfg: &EpisodeConfig,
) -> Result<EpisodeRecord> {
    let prompt = match baseline {
        PromptBaseline::Direct => render_direct_prompt(problem),
        PromptBaseline::Cot => render_cot_prompt(problem),
        PromptBaseline::FewShot => {
            if demos.is_empty() {
                return Err(Error::config(
                    "few-shot prompting needs at least one demonstration",
                ));
            }
            render_few_shot_prompt(problem, demos)
        }
    };
    let start = Instant::now();
    let req = GenerationRequest {
        prompt,
        temperature: 0.0,
        max_tokens: cfg.max_tokens,
        seed: None,
    };
    let mut flags = EpisodeFlags::default();
    let (completion, error) = match orch.backend().generate(&req) {
        Ok(c) => (c, None),
        Err(e) => {
            flags.failed = true;
            (String::new(), Some(e.to_string()))
        }
    };
    let extracted = extract_answer(&completion, &problem.labels());
    flags.malformed = !flags.failed && extracted.is_none();
    let correct = answer_match(extracted, problem.gold_label);
    let exchanges = if cfg.record_exchanges && !flags.failed {
        vec![Exchange {
            role: "reasoner".into(),
            prompt: req.prompt,
            completion,
        }]
    } else {
        Vec::new()
    };
    Ok(EpisodeRecord {
        problem_id: problem.id.clone(),
        gold_label: problem.gold_label,
        transitions: Vec::new(),
        rounds: Vec::new(),
        extracted_answer: extracted,
        correct,
        reward: cfg.reward.reward(correct),
        flags,
        error,
        exchanges,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
