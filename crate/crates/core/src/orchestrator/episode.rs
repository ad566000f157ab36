use std::time::Instant;

use log::{debug, warn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{
    answer_match, render_query, render_thoughts, state_render, DialogueState, EpisodeFlags,
    EpisodeRecord, Exchange, Problem, RoundRecord, Transition,
};
use crate::error::Result;
use crate::gateway::prompts::{
    clean_hint, extract_answer, parse_score, render_free_hint_prompt, render_hint_prompt,
    render_reasoning_prompt, render_score_prompt, render_strategy_selection_prompt, strategy_slot,
};
use crate::gateway::{GatewayError, GenerationRequest};
use crate::nets::{policy_forward, value_forward};
use crate::strategy::{MetaStrategy, StrategyPool};

use super::baselines::select_best;
use super::{
    EpisodeConfig, LearnedPolicy, Orchestrator, PlannerPolicy, PlanningMode, PolicyVariant,
    ToTConfig,
};

/// Mutable context of one running episode: its RNG, audit trail and flags.
pub struct EpisodeRun<'a> {
    pub orch: &'a Orchestrator,
    pub cfg: &'a EpisodeConfig,
    pub rng: &'a mut ChaCha8Rng,
    pub exchanges: Vec<Exchange>,
    pub flags: EpisodeFlags,
}

/// A planner decision before it is executed.
struct Decision {
    strategy: Option<MetaStrategy>,
    /// Hint text already produced while deciding (pick-hint, ToT).
    hint: Option<String>,
    /// Reasoner response already produced while deciding (ToT).
    thought: Option<String>,
    transition: Transition,
}

fn blank_transition(action_index: usize, log_prob: f64) -> Transition {
    Transition {
        obs_embedding: Vec::new(),
        action_embeddings: Vec::new(),
        action_index,
        log_prob,
        value_estimate: 0.0,
        reward: 0.0,
        done: false,
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl<'a> EpisodeRun<'a> {
    pub fn new(orch: &'a Orchestrator, cfg: &'a EpisodeConfig, rng: &'a mut ChaCha8Rng) -> Self {
        EpisodeRun {
            orch,
            cfg,
            rng,
            exchanges: Vec::new(),
            flags: EpisodeFlags::default(),
        }
    }

    fn request(&mut self, temperature: f64, prompt: String) -> GenerationRequest {
        let seed = (temperature > 0.0).then(|| self.rng.gen::<u64>());
        GenerationRequest {
            prompt,
            temperature,
            max_tokens: self.cfg.max_tokens,
            seed,
        }
    }

    fn call(&mut self, role: &str, req: &GenerationRequest) -> Result<String, GatewayError> {
        let out = self.orch.backend().generate(req)?;
        if self.cfg.record_exchanges {
            self.exchanges.push(Exchange {
                role: role.into(),
                prompt: req.prompt.clone(),
                completion: out.clone(),
            });
        }
        Ok(out)
    }

    /// Issues a prompt built from the state's query and thoughts. When the
    /// backend rejects it for length, the oldest thoughts are dropped one at
    /// a time until it fits.
    pub fn call_with_state(
        &mut self,
        role: &str,
        state: &DialogueState,
        temperature: f64,
        build: &dyn Fn(&str, &str) -> String,
    ) -> Result<String> {
        let query = render_query(state.problem());
        let thoughts: Vec<&str> = state.rounds().iter().map(|r| r.thought.as_str()).collect();
        let req = self.request(temperature, String::new());
        for skip in 0..=thoughts.len() {
            let rendered = render_thoughts(thoughts[skip..].iter().copied());
            let req = GenerationRequest {
                prompt: build(&query, &rendered),
                ..req.clone()
            };
            match self.call(role, &req) {
                Ok(out) => {
                    if skip > 0 {
                        self.flags.truncated = true;
                        debug!("dropped {skip} oldest thought(s) to fit the context");
                    }
                    return Ok(out);
                }
                Err(e) if e.is_context_overflow() && skip < thoughts.len() => continue,
                Err(e) => return Err(e.into()),
            }
        }
        unreachable!("loop returns on its last iteration")
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.orch.backend().embed(text)?.into_inner())
    }

    fn candidate_embeddings(&self, candidates: &[MetaStrategy]) -> Result<Vec<Vec<f64>>> {
        candidates
            .iter()
            .map(|s| self.orch.strategy_embedding(*s))
            .collect()
    }

    /// Hint for `strategy` in the current state.
    fn strategy_hint(
        &mut self,
        state: &DialogueState,
        strategy: MetaStrategy,
        temperature: f64,
    ) -> Result<String> {
        let slot = strategy_slot(strategy);
        let raw = self.call_with_state("planner", state, temperature, &|q, t| {
            render_hint_prompt(q, t, &slot)
        })?;
        let hint = clean_hint(&raw);
        Ok(if hint.is_empty() {
            strategy.instruction().to_string()
        } else {
            hint
        })
    }

    fn free_hint(&mut self, state: &DialogueState) -> Result<String> {
        let raw =
            self.call_with_state("planner", state, self.cfg.free_hint_temperature, &|q, t| {
                render_free_hint_prompt(q, t)
            })?;
        Ok(clean_hint(&raw))
    }

    /// One reasoning step of the reasoner following `hint`.
    pub fn reason(&mut self, state: &DialogueState, hint: &str) -> Result<String> {
        self.call_with_state("reasoner", state, 0.0, &|q, t| {
            render_reasoning_prompt(q, t, hint)
        })
    }

    /// Pick-hint candidates: texts and the strategy behind each (None for
    /// unconditioned hints). Finish is represented by its instruction.
    fn hint_candidates(
        &mut self,
        state: &DialogueState,
        candidates: &[MetaStrategy],
        with_strategy: bool,
    ) -> Result<Vec<(Option<MetaStrategy>, String)>> {
        if with_strategy {
            let mut out = Vec::with_capacity(candidates.len());
            for &s in candidates {
                let text = if s == MetaStrategy::Finish {
                    s.instruction().to_string()
                } else {
                    self.strategy_hint(state, s, self.cfg.hint_temperature)?
                };
                out.push((Some(s), text));
            }
            Ok(out)
        } else {
            (0..candidates.len())
                .map(|_| Ok((None, self.free_hint(state)?)))
                .collect()
        }
    }

    fn decide_learned(
        &mut self,
        state: &DialogueState,
        net: &LearnedPolicy,
        mode: PlanningMode,
        candidates: &[MetaStrategy],
    ) -> Result<Decision> {
        let obs = self.embed(&state_render(state))?;
        let forced = candidates.len() == 1;
        let (labels, texts, actions) = match mode {
            PlanningMode::PickHint { with_strategy } if !forced => {
                let c = self.hint_candidates(state, candidates, with_strategy)?;
                let mut actions = Vec::with_capacity(c.len());
                for (s, text) in &c {
                    actions.push(match s {
                        Some(MetaStrategy::Finish) => {
                            self.orch.strategy_embedding(MetaStrategy::Finish)?
                        }
                        _ => self.embed(text)?,
                    });
                }
                let (labels, texts): (Vec<_>, Vec<_>) = c.into_iter().unzip();
                (labels, Some(texts), actions)
            }
            _ => (
                candidates.iter().map(|s| Some(*s)).collect(),
                None,
                self.candidate_embeddings(candidates)?,
            ),
        };
        let (out, _) = policy_forward(&net.policy, &obs, &actions)?;
        let index = if net.sample {
            sample_index(&out.probs, self.rng)
        } else {
            argmax(&out.probs)
        };
        let value = match &net.value {
            Some(v) => value_forward(v, &obs)?.0,
            None => 0.0,
        };
        Ok(Decision {
            strategy: labels[index],
            hint: texts.map(|mut t| t.swap_remove(index)),
            thought: None,
            transition: Transition {
                obs_embedding: obs,
                action_embeddings: actions,
                action_index: index,
                log_prob: out.log_probs[index],
                value_estimate: value,
                reward: 0.0,
                done: false,
            },
        })
    }

    fn decide_random(
        &mut self,
        state: &DialogueState,
        mode: PlanningMode,
        candidates: &[MetaStrategy],
    ) -> Result<Decision> {
        let allowed: Vec<usize> = (0..candidates.len())
            .filter(|&i| {
                !(self.cfg.random_skips_opening_finish
                    && candidates.len() > 1
                    && state.round_index() == 0
                    && candidates[i] == MetaStrategy::Finish)
            })
            .collect();
        let index = allowed[self.rng.gen_range(0..allowed.len())];
        let log_prob = -(allowed.len() as f64).ln();
        let forced = candidates.len() == 1;
        let mut decision = Decision {
            strategy: Some(candidates[index]),
            hint: None,
            thought: None,
            transition: blank_transition(index, log_prob),
        };
        match mode {
            PlanningMode::PickHint { with_strategy } if !forced => {
                // Only the chosen hint is needed unless embeddings are kept.
                if self.cfg.record_embeddings {
                    let c = self.hint_candidates(state, candidates, with_strategy)?;
                    let mut actions = Vec::with_capacity(c.len());
                    for (s, text) in &c {
                        actions.push(match s {
                            Some(MetaStrategy::Finish) => {
                                self.orch.strategy_embedding(MetaStrategy::Finish)?
                            }
                            _ => self.embed(text)?,
                        });
                    }
                    decision.transition.obs_embedding = self.embed(&state_render(state))?;
                    decision.transition.action_embeddings = actions;
                    let (s, text) = c[index].clone();
                    decision.strategy = s;
                    decision.hint = Some(text);
                } else if with_strategy {
                    let s = candidates[index];
                    if s != MetaStrategy::Finish {
                        decision.hint =
                            Some(self.strategy_hint(state, s, self.cfg.hint_temperature)?);
                    }
                } else {
                    decision.strategy = None;
                    decision.hint = Some(self.free_hint(state)?);
                }
            }
            _ => {
                if self.cfg.record_embeddings {
                    decision.transition.obs_embedding = self.embed(&state_render(state))?;
                    decision.transition.action_embeddings =
                        self.candidate_embeddings(candidates)?;
                }
            }
        }
        Ok(decision)
    }

    /// Asks the planner's language model for a strategy. Falls back to a
    /// uniform choice (and sets the flag) when no strategy can be read off.
    pub fn select_strategy_cot(&mut self, state: &DialogueState) -> Result<MetaStrategy> {
        let completion = self.call_with_state("planner", state, 0.0, &|q, t| {
            render_strategy_selection_prompt(q, t)
        })?;
        Ok(match MetaStrategy::identify(&completion) {
            Some(s) => s,
            None => {
                warn!("strategy selection unparseable; falling back to a random strategy");
                self.flags.fallback = true;
                MetaStrategy::ALL[self.rng.gen_range(0..MetaStrategy::ALL.len())]
            }
        })
    }

    fn score(
        &mut self,
        state: &DialogueState,
        hint: &str,
        response: Option<&str>,
        aspect: crate::gateway::prompts::Aspect,
    ) -> Result<u8> {
        let completion = self.call_with_state("evaluator", state, 0.0, &|q, t| {
            render_score_prompt(q, t, hint, response, aspect)
        })?;
        Ok(parse_score(&completion).unwrap_or_else(|| {
            warn!("unparseable {aspect:?} score; counting it as 2");
            self.flags.unparsed_score = true;
            2
        }))
    }

    /// Samples hints from random strategies, executes one reasoning step for
    /// each, scores them on every aspect and keeps the best. Returns the
    /// strategy, hint and reasoner response of the winner.
    pub fn select_hint_tot(
        &mut self,
        state: &DialogueState,
        cfg: &ToTConfig,
    ) -> Result<(MetaStrategy, String, String)> {
        let pool: Vec<MetaStrategy> = MetaStrategy::ALL
            .into_iter()
            .filter(|s| *s != MetaStrategy::Finish)
            .collect();
        let mut candidates = Vec::with_capacity(cfg.hint_samples);
        let mut scores = Vec::with_capacity(cfg.hint_samples);
        for _ in 0..cfg.hint_samples.max(1) {
            let s = pool[self.rng.gen_range(0..pool.len())];
            let hint = self.strategy_hint(state, s, cfg.temperature)?;
            let response = self.reason(state, &hint)?;
            let mut row = Vec::new();
            for &a in &cfg.hint_aspects {
                row.push(self.score(state, &hint, None, a)?);
            }
            for &a in &cfg.reasoning_aspects {
                row.push(self.score(state, &hint, Some(&response), a)?);
            }
            scores.push(row);
            candidates.push((s, hint, response));
        }
        let best = select_best(&scores).unwrap_or(0);
        Ok(candidates.swap_remove(best))
    }

    fn decide(&mut self, state: &DialogueState, policy: &PlannerPolicy) -> Result<Decision> {
        let forced = state.round_index() >= self.cfg.max_rounds;
        let candidates = StrategyPool.candidates(state, forced);
        match &policy.variant {
            PolicyVariant::Learned(net) => {
                self.decide_learned(state, net, policy.mode, &candidates)
            }
            PolicyVariant::Random => self.decide_random(state, policy.mode, &candidates),
            _ if forced => Ok(Decision {
                strategy: Some(MetaStrategy::Finish),
                hint: None,
                thought: None,
                transition: blank_transition(0, 0.0),
            }),
            PolicyVariant::Scripted(seq) => {
                let s = seq
                    .get(state.round_index())
                    .copied()
                    .unwrap_or(MetaStrategy::Finish);
                Ok(Decision {
                    strategy: Some(s),
                    hint: None,
                    thought: None,
                    transition: blank_transition(s.index(), 0.0),
                })
            }
            PolicyVariant::CoTPrompted => {
                let s = self.select_strategy_cot(state)?;
                Ok(Decision {
                    strategy: Some(s),
                    hint: None,
                    thought: None,
                    transition: blank_transition(s.index(), 0.0),
                })
            }
            PolicyVariant::ToTSearch(cfg) => {
                let (s, hint, thought) = self.select_hint_tot(state, cfg)?;
                Ok(Decision {
                    strategy: Some(s),
                    hint: Some(hint),
                    thought: Some(thought),
                    transition: blank_transition(s.index(), 0.0),
                })
            }
        }
    }

    /// Executes the interaction loop until Finish.
    fn play(
        &mut self,
        state: &mut DialogueState,
        policy: &PlannerPolicy,
        transitions: &mut Vec<Transition>,
    ) -> Result<(Option<char>, bool)> {
        loop {
            let decision = self.decide(state, policy)?;
            let mut transition = decision.transition;
            if decision.strategy == Some(MetaStrategy::Finish) {
                let completion = self.reason(state, MetaStrategy::Finish.instruction())?;
                let extracted = extract_answer(&completion, &state.problem().labels());
                let correct = answer_match(extracted, state.problem().gold_label);
                self.flags.malformed = extracted.is_none();
                transition.reward = self.cfg.reward.reward(correct);
                transition.done = true;
                transitions.push(transition);
                state.push(RoundRecord {
                    strategy: Some(MetaStrategy::Finish),
                    hint: String::new(),
                    thought: completion,
                });
                return Ok((extracted, correct));
            }
            let hint = match (decision.hint, decision.strategy, policy.mode) {
                (Some(h), _, _) => h,
                (None, Some(s), PlanningMode::PickStrategy { with_hint: false }) => {
                    s.instruction().to_string()
                }
                (None, Some(s), _) => self.strategy_hint(state, s, self.cfg.hint_temperature)?,
                (None, None, _) => self.free_hint(state)?,
            };
            let thought = match decision.thought {
                Some(t) => t,
                None => self.reason(state, &hint)?,
            };
            let thought = if thought.trim().is_empty() {
                "(no response)".to_string()
            } else {
                thought
            };
            transitions.push(transition);
            state.push(RoundRecord {
                strategy: decision.strategy,
                hint,
                thought,
            });
        }
    }
}

/// Runs one episode. Backend failures do not abort the caller: the record
/// comes back flagged as failed and graded incorrect.
pub fn run_episode(
    orch: &Orchestrator,
    problem: &Problem,
    policy: &PlannerPolicy,
    cfg: &EpisodeConfig,
    rng: &mut ChaCha8Rng,
) -> EpisodeRecord {
    let start = Instant::now();
    let mut run = EpisodeRun::new(orch, cfg, rng);
    let mut state = DialogueState::new(problem.clone());
    let mut transitions = Vec::new();
    let outcome = run.play(&mut state, policy, &mut transitions);
    let (extracted, correct, error) = match outcome {
        Ok((e, c)) => (e, c, None),
        Err(e) => {
            warn!("episode for problem {} failed: {e}", problem.id);
            run.flags.failed = true;
            run.flags.malformed = false;
            (None, false, Some(e.to_string()))
        }
    };
    EpisodeRecord {
        problem_id: problem.id.clone(),
        gold_label: problem.gold_label,
        transitions,
        rounds: state.rounds().to_vec(),
        extracted_answer: extracted,
        correct,
        reward: cfg.reward.reward(correct),
        flags: run.flags,
        error,
        exchanges: run.exchanges,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

pub fn select_strategy_cot(
    orch: &Orchestrator,
    state: &DialogueState,
    rng: &mut ChaCha8Rng,
) -> Result<(MetaStrategy, bool)> {
    let cfg = EpisodeConfig::default();
    let mut run = EpisodeRun::new(orch, &cfg, rng);
    let s = run.select_strategy_cot(state)?;
    Ok((s, run.flags.fallback))
}

pub fn select_hint_tot(
    orch: &Orchestrator,
    state: &DialogueState,
    cfg: &ToTConfig,
    rng: &mut ChaCha8Rng,
) -> Result<String> {
    let ecfg = EpisodeConfig::default();
    let mut run = EpisodeRun::new(orch, &ecfg, rng);
    Ok(run.select_hint_tot(state, cfg)?.1)
}
