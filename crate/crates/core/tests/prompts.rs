mod common;

use std::collections::HashSet;

use coplanner::gateway::prompts::{extract_answer, parse_score, render_hint_prompt, strategy_slot};
use coplanner::MetaStrategy;
use proptest::prelude::*;

#[test]
fn templates_instructions_and_scores_match_reference_texts() {
    common::check_prompt_fidelity().unwrap();
}

#[test]
fn strategy_slot_carries_the_instruction_verbatim() {
    for (s, (name, text)) in MetaStrategy::ALL.iter().zip(common::INSTRUCTIONS) {
        assert_eq!(strategy_slot(*s), format!("{name}: {text}"));
        let p = render_hint_prompt("q", "", &strategy_slot(*s));
        assert!(p.contains(text));
    }
}

fn labels() -> HashSet<char> {
    "ABCDE".chars().collect()
}

proptest! {
    #[test]
    fn extraction_stays_within_valid_labels(text in ".{0,200}") {
        if let Some(c) = extract_answer(&text, &labels()) {
            prop_assert!(labels().contains(&c));
        }
    }

    #[test]
    fn extraction_of_wrapped_json(
        pre in "[^{}]{0,40}",
        post in "[^{}]{0,40}",
        idx in 0usize..5,
        lower in any::<bool>(),
    ) {
        let label = (b'A' + idx as u8) as char;
        let shown = if lower { label.to_ascii_lowercase() } else { label };
        let text = format!("{pre}{{\"answer\": \"{shown}\"}}{post}");
        prop_assert_eq!(extract_answer(&text, &labels()), Some(label));
    }

    #[test]
    fn scores_parse_only_in_range(
        pre in "[a-z ,.]{0,30}",
        post in "[a-z ,.]{0,30}",
        x in 0u8..10,
    ) {
        let text = format!("{pre}The score is {x}{post}");
        let want = (1..=3).contains(&x).then_some(x);
        prop_assert_eq!(parse_score(&text), want);
    }
}
