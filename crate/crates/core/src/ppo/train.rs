use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::EpisodeRecord;
use crate::error::{Error, Result};
use crate::nets::{
    entropy, entropy_logit_grad, log_prob_logit_grad, policy_backward, policy_forward,
    value_backward, value_forward, Adam, Parameters, PolicyParams, ValueParams,
};

use super::{ppo_policy_loss, value_loss, RolloutBuffer, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub value_loss_coef: f64,
    pub entropy_coef: f64,
    pub ppo_epochs: usize,
    /// Complete episodes collected per update cycle.
    pub batch_episodes: usize,
    /// Transitions per gradient step.
    pub minibatch: usize,
    pub lr: f64,
    pub warmup_freeze_steps: u64,
    pub total_env_steps: u64,
    pub grad_clip: f64,
    pub normalize_advantages: bool,
    /// An epoch whose mean `|ratio - 1|` exceeds this rolls the update back.
    pub divergence_threshold: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.1,
            gamma: 0.99,
            gae_lambda: 0.95,
            value_loss_coef: 0.5,
            entropy_coef: 1e-5,
            ppo_epochs: 10,
            batch_episodes: 32,
            minibatch: 32,
            lr: 5e-4,
            warmup_freeze_steps: 1000,
            total_env_steps: 5000,
            grad_clip: 10.0,
            normalize_advantages: true,
            divergence_threshold: 10.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if self.ppo_epochs == 0 || self.batch_episodes == 0 || self.minibatch == 0 {
            return bad("ppo_epochs, batch_episodes and minibatch must be positive");
        }
        if !(self.lr >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("lr must be >= 0 and grad_clip > 0");
        }
        if self.total_env_steps == 0 {
            return bad("total_env_steps must be positive");
        }
        Ok(())
    }

    /// Linear decay from `lr` at step 0 to 0 at `total_env_steps`.
    pub fn lr_at(&self, env_step: u64) -> f64 {
        let frac = 1.0 - env_step as f64 / self.total_env_steps as f64;
        self.lr * frac.clamp(0.0, 1.0)
    }
}

/// Produces complete episodes for the learner.
pub trait EpisodeSource {
    /// Runs `count` episodes, sampling actions from `policy`. Episodes are
    /// numbered globally from `first` so each one owns a fixed RNG stream.
    fn collect(
        &self,
        policy: &PolicyParams,
        value: &ValueParams,
        first: u64,
        count: usize,
    ) -> Result<Vec<EpisodeRecord>>;
}

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoState {
    pub policy: PolicyParams,
    pub value: ValueParams,
    pub policy_opt: Adam,
    pub value_opt: Adam,
    pub rng: ChaCha8Rng,
    pub env_steps: u64,
    pub updates: u64,
    pub episodes_seen: u64,
}

impl PpoState {
    pub fn new(policy: PolicyParams, value: ValueParams, seed: u64) -> Self {
        PpoState {
            policy_opt: Adam::new(&policy),
            value_opt: Adam::new(&value),
            policy,
            value,
            rng: ChaCha8Rng::seed_from_u64(seed),
            env_steps: 0,
            updates: 0,
            episodes_seen: 0,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub mean_reward: f64,
    pub accuracy: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub policy_frozen: bool,
    pub aborted: bool,
}

fn normalize(values: &mut [f64]) {
    if values.len() < 2 {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    for v in values {
        *v = (*v - mean) / std;
    }
}

struct PolicyPass {
    loss: f64,
    entropy: f64,
    clip_fraction: f64,
    grads: PolicyParams,
}

fn policy_pass(
    params: &PolicyParams,
    batch: &[&Sample],
    advantages: &[f64],
    cfg: &PpoConfig,
) -> Result<PolicyPass> {
    let mut new_lp = Vec::with_capacity(batch.len());
    let mut ents = Vec::with_capacity(batch.len());
    let mut fwd = Vec::with_capacity(batch.len());
    for s in batch {
        let (out, cache) = policy_forward(params, &s.obs, &s.actions)?;
        new_lp.push(out.log_probs[s.action_index]);
        ents.push(entropy(&out.probs, &out.log_probs));
        fwd.push((out, cache));
    }
    let old: Vec<f64> = batch.iter().map(|s| s.old_log_prob).collect();
    let loss = ppo_policy_loss(
        &old,
        &new_lp,
        advantages,
        &ents,
        cfg.clip_eps,
        cfg.entropy_coef,
    )?;
    let mut grads = params.zeros_like();
    for (i, (out, cache)) in fwd.iter().enumerate() {
        let a = log_prob_logit_grad(&out.probs, batch[i].action_index, loss.d_new_log_probs[i]);
        let e = entropy_logit_grad(&out.probs, &out.log_probs, loss.d_entropies[i]);
        let d_logits: Vec<f64> = a.iter().zip(&e).map(|(x, y)| x + y).collect();
        grads.add_scaled(&policy_backward(params, cache, &d_logits)?, 1.0);
    }
    Ok(PolicyPass {
        loss: loss.loss,
        entropy: ents.iter().sum::<f64>() / ents.len() as f64,
        clip_fraction: loss.clip_fraction,
        grads,
    })
}

fn value_pass(params: &ValueParams, batch: &[&Sample], coef: f64) -> Result<(f64, ValueParams)> {
    let mut preds = Vec::with_capacity(batch.len());
    let mut caches = Vec::with_capacity(batch.len());
    for s in batch {
        let (v, cache) = value_forward(params, &s.obs)?;
        preds.push(v);
        caches.push(cache);
    }
    let rets: Vec<f64> = batch.iter().map(|s| s.ret).collect();
    let (loss, d_preds) = value_loss(&preds, &rets, coef)?;
    let mut grads = params.zeros_like();
    for (cache, d) in caches.iter().zip(d_preds) {
        grads.add_scaled(&value_backward(params, cache, d)?, 1.0);
    }
    Ok((loss, grads))
}

/// Mean `|ratio - 1|` of the current policy over all policy samples.
fn ratio_deviation(params: &PolicyParams, samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut dev = 0.0;
    for s in samples {
        let (out, _) = policy_forward(params, &s.obs, &s.actions)?;
        dev += ((out.log_probs[s.action_index] - s.old_log_prob).exp() - 1.0).abs();
    }
    Ok(dev / samples.len() as f64)
}

/// Runs `ppo_epochs` passes over a finalized buffer. The policy is left
/// untouched when `freeze_policy` is set. If an epoch ends with the mean
/// ratio deviation above the threshold, networks and optimizers are
/// restored to their pre-update state.
pub fn update_networks(
    state: &mut PpoState,
    samples: &[Sample],
    cfg: &PpoConfig,
    lr: f64,
    freeze_policy: bool,
) -> Result<UpdateStats> {
    let snapshot = (
        state.policy.clone(),
        state.value.clone(),
        state.policy_opt.clone(),
        state.value_opt.clone(),
    );
    let policy_samples: Vec<&Sample> = samples.iter().filter(|s| s.is_policy_sample()).collect();
    let mut advantages: Vec<f64> = policy_samples.iter().map(|s| s.advantage).collect();
    if cfg.normalize_advantages {
        normalize(&mut advantages);
    }
    let mut stats = UpdateStats {
        policy_frozen: freeze_policy,
        ..UpdateStats::default()
    };
    let (mut p_batches, mut v_batches) = (0usize, 0usize);
    let all: Vec<&Sample> = samples.iter().collect();
    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut p_order: Vec<usize> = (0..policy_samples.len()).collect();

    for epoch in 0..cfg.ppo_epochs {
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(cfg.minibatch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| all[i]).collect();
            let (loss, grads) = value_pass(&state.value, &batch, cfg.value_loss_coef)?;
            state
                .value_opt
                .step(&mut state.value, &grads, lr, cfg.grad_clip)?;
            stats.value_loss += loss;
            v_batches += 1;
        }
        if freeze_policy || policy_samples.is_empty() {
            continue;
        }
        p_order.shuffle(&mut state.rng);
        for chunk in p_order.chunks(cfg.minibatch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| policy_samples[i]).collect();
            let adv: Vec<f64> = chunk.iter().map(|&i| advantages[i]).collect();
            let pass = policy_pass(&state.policy, &batch, &adv, cfg)?;
            state
                .policy_opt
                .step(&mut state.policy, &pass.grads, lr, cfg.grad_clip)?;
            stats.policy_loss += pass.loss;
            stats.entropy += pass.entropy;
            stats.clip_fraction += pass.clip_fraction;
            p_batches += 1;
        }
        let dev = ratio_deviation(&state.policy, &policy_samples)?;
        if dev > cfg.divergence_threshold {
            warn!("update diverged in epoch {epoch} (mean |ratio - 1| = {dev:.3}); rolling back");
            (state.policy, state.value, state.policy_opt, state.value_opt) = snapshot;
            return Ok(UpdateStats {
                aborted: true,
                policy_frozen: freeze_policy,
                ..UpdateStats::default()
            });
        }
    }
    if v_batches > 0 {
        stats.value_loss /= v_batches as f64;
    }
    if p_batches > 0 {
        stats.policy_loss /= p_batches as f64;
        stats.entropy /= p_batches as f64;
        stats.clip_fraction /= p_batches as f64;
    } else if !policy_samples.is_empty() {
        // Frozen: report the current policy's entropy on the buffer.
        let mut h = 0.0;
        for s in &policy_samples {
            let (out, _) = policy_forward(&state.policy, &s.obs, &s.actions)?;
            h += entropy(&out.probs, &out.log_probs);
        }
        stats.entropy = h / policy_samples.len() as f64;
    }
    Ok(stats)
}

/// Trains until `cfg.total_env_steps` environment steps have been taken,
/// continuing from whatever progress `state` records. `on_update` runs after
/// every update cycle (logging, checkpointing).
pub fn train_ppo<E, F>(
    env: &E,
    state: &mut PpoState,
    cfg: &PpoConfig,
    mut on_update: F,
) -> Result<Vec<MetricsRow>>
where
    E: EpisodeSource + ?Sized,
    F: FnMut(&PpoState, &MetricsRow, &UpdateStats) -> Result<()>,
{
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut buffer = RolloutBuffer::new();
    while state.env_steps < cfg.total_env_steps {
        let records = env.collect(
            &state.policy,
            &state.value,
            state.episodes_seen,
            cfg.batch_episodes,
        )?;
        state.episodes_seen += records.len() as u64;
        let usable: Vec<&EpisodeRecord> = records.iter().filter(|r| !r.flags.failed).collect();
        if usable.is_empty() {
            return Err(Error::Training(
                "every episode of an update cycle failed; check the backend".into(),
            ));
        }
        if usable.len() < records.len() {
            warn!(
                "{} failed episodes dropped from the buffer",
                records.len() - usable.len()
            );
        }
        buffer.clear();
        for r in &usable {
            buffer.push_episode(r.transitions.clone())?;
        }
        let lr = cfg.lr_at(state.env_steps);
        let steps = buffer.num_transitions() as u64;
        state.env_steps += steps;
        // The policy stays fixed until the environment steps taken so far,
        // including this buffer, exceed the warmup.
        let freeze = state.env_steps <= cfg.warmup_freeze_steps;
        let samples = buffer.finalize(cfg.gamma, cfg.gae_lambda)?.to_vec();
        let stats = update_networks(state, &samples, cfg, lr, freeze)?;
        state.updates += 1;
        let n = usable.len() as f64;
        let row = MetricsRow {
            step: state.env_steps,
            mean_reward: usable.iter().map(|r| r.reward).sum::<f64>() / n,
            accuracy: usable.iter().filter(|r| r.correct).count() as f64 / n,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
            lr,
        };
        info!(
            "update {} step {} acc {:.3} reward {:.3} vloss {:.4} entropy {:.3}{}",
            state.updates,
            row.step,
            row.accuracy,
            row.mean_reward,
            row.value_loss,
            row.entropy,
            if stats.policy_frozen {
                " (policy frozen)"
            } else {
                ""
            }
        );
        on_update(state, &row, &stats)?;
        rows.push(row);
    }
    Ok(rows)
}
