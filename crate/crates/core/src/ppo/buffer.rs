use crate::domain::{EpisodeRecord, Transition};
use crate::error::{Error, Result};

use super::compute_gae;

/// One buffered decision with its advantage and return.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub obs: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    pub action_index: usize,
    pub old_log_prob: f64,
    pub value_estimate: f64,
    pub advantage: f64,
    pub ret: f64,
}

impl Sample {
    /// Decisions with a single candidate carry no policy gradient.
    pub fn is_policy_sample(&self) -> bool {
        self.actions.len() > 1
    }
}

/// Complete episodes collected between two updates.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    episodes: Vec<Vec<Transition>>,
    samples: Vec<Sample>,
    finalized: bool,
}

fn check_episode(transitions: &[Transition]) -> Result<()> {
    let Some(last) = transitions.last() else {
        return Err(Error::Training("episode without transitions".into()));
    };
    if !last.done || transitions.iter().filter(|t| t.done).count() != 1 {
        return Err(Error::Training(
            "episode must end with its only terminal transition".into(),
        ));
    }
    for (i, t) in transitions.iter().enumerate() {
        if !t.has_embeddings() || t.action_index >= t.num_candidates() {
            return Err(Error::Training(format!(
                "transition {i} lacks embeddings or has an out-of-range action"
            )));
        }
        if !t.done && t.reward != 0.0 {
            return Err(Error::Training(format!(
                "intermediate transition {i} has nonzero reward {}",
                t.reward
            )));
        }
    }
    Ok(())
}

impl RolloutBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_episode(&mut self, transitions: Vec<Transition>) -> Result<()> {
        if self.finalized {
            return Err(Error::Training("buffer already finalized".into()));
        }
        check_episode(&transitions)?;
        self.episodes.push(transitions);
        Ok(())
    }

    /// Adds every usable episode of `records`; failed ones are skipped.
    /// Returns the number added.
    pub fn extend_from_records(&mut self, records: &[EpisodeRecord]) -> Result<usize> {
        let mut added = 0;
        for r in records.iter().filter(|r| !r.flags.failed) {
            self.push_episode(r.transitions.clone())?;
            added += 1;
        }
        Ok(added)
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    /// Computes advantages and returns for every buffered episode.
    pub fn finalize(&mut self, gamma: f64, lambda: f64) -> Result<&[Sample]> {
        if !self.finalized {
            for ep in &self.episodes {
                let rewards: Vec<f64> = ep.iter().map(|t| t.reward).collect();
                let mut values: Vec<f64> = ep.iter().map(|t| t.value_estimate).collect();
                values.push(0.0);
                let (adv, ret) = compute_gae(&rewards, &values, gamma, lambda)?;
                for (i, t) in ep.iter().enumerate() {
                    self.samples.push(Sample {
                        obs: t.obs_embedding.clone(),
                        actions: t.action_embeddings.clone(),
                        action_index: t.action_index,
                        old_log_prob: t.log_prob,
                        value_estimate: t.value_estimate,
                        advantage: adv[i],
                        ret: ret[i],
                    });
                }
            }
            self.finalized = true;
        }
        Ok(&self.samples)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn clear(&mut self) {
        self.episodes.clear();
        self.samples.clear();
        self.finalized = false;
    }
}
