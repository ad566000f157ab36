mod common;

use std::sync::Arc;

use common::rel_err;
use coplanner::gateway::{GenerateOptions, ScriptedWorld, WorldSpec};
use coplanner::nets::{PolicyParams, ValueParams};
use coplanner::orchestrator::{EpisodeConfig, Orchestrator, PpoEnv};
use coplanner::ppo::{
    clipped_objective, ppo_policy_loss, train_ppo, update_networks, value_loss, PpoConfig,
    PpoState, Sample,
};
use coplanner::Split;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn clipping_spot_values() {
    assert_eq!(clipped_objective(1.0, 2.0, 0.1).0, 2.0);
    let (obj, grad) = clipped_objective(1.5, 1.0, 0.1);
    assert_eq!(obj, 1.1);
    assert_eq!(grad, 0.0);
    let (obj, grad) = clipped_objective(0.5, -1.0, 0.1);
    assert_eq!(obj, -0.9);
    assert_eq!(grad, 0.0);
}

#[test]
fn value_loss_spot_values() {
    assert_eq!(value_loss(&[0.3, -1.0], &[0.3, -1.0], 0.5).unwrap().0, 0.0);
    assert_eq!(value_loss(&[0.0], &[2.0], 0.5).unwrap().0, 2.0);
}

proptest! {
    #[test]
    fn policy_loss_gradient_matches_finite_differences(
        seed in 0u64..10_000,
        n in 1usize..8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let old: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..-0.1)).collect();
        // Keep every ratio away from the clip boundaries, where the
        // objective has a kink.
        let new: Vec<f64> = old
            .iter()
            .map(|o| {
                let shift = if rng.gen_bool(0.5) { rng.gen_range(-0.05..0.05) } else { rng.gen_range(0.2..0.5) };
                o + shift
            })
            .collect();
        let adv: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ent: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
        let (eps, coef) = (0.1, 0.01);
        let base = ppo_policy_loss(&old, &new, &adv, &ent, eps, coef).unwrap();
        prop_assert!((0.0..=1.0).contains(&base.clip_fraction));
        let h = 1e-6;
        for i in 0..n {
            let mut up = new.clone();
            up[i] += h;
            let mut down = new.clone();
            down[i] -= h;
            let fd = (ppo_policy_loss(&old, &up, &adv, &ent, eps, coef).unwrap().loss
                - ppo_policy_loss(&old, &down, &adv, &ent, eps, coef).unwrap().loss)
                / (2.0 * h);
            prop_assert!(rel_err(base.d_new_log_probs[i], fd) < 1e-4);

            let mut up = ent.clone();
            up[i] += h;
            let mut down = ent.clone();
            down[i] -= h;
            let fd = (ppo_policy_loss(&old, &new, &adv, &up, eps, coef).unwrap().loss
                - ppo_policy_loss(&old, &new, &adv, &down, eps, coef).unwrap().loss)
                / (2.0 * h);
            prop_assert!(rel_err(base.d_entropies[i], fd) < 1e-4);
        }
    }

    #[test]
    fn value_loss_gradient_matches_finite_differences(
        preds in prop::collection::vec(-3.0f64..3.0, 1..10),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rets: Vec<f64> = preds.iter().map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (_, grads) = value_loss(&preds, &rets, 0.5).unwrap();
        let h = 1e-6;
        for i in 0..preds.len() {
            let mut up = preds.clone();
            up[i] += h;
            let mut down = preds.clone();
            down[i] -= h;
            let fd = (value_loss(&up, &rets, 0.5).unwrap().0 - value_loss(&down, &rets, 0.5).unwrap().0) / (2.0 * h);
            prop_assert!(rel_err(grads[i], fd) < 1e-4);
        }
    }
}

fn world() -> (WorldSpec, Orchestrator) {
    let spec = WorldSpec::generate(&GenerateOptions::default());
    let orch = Orchestrator::new(Arc::new(ScriptedWorld::new(spec.clone()).unwrap()));
    (spec, orch)
}

#[test]
fn policy_is_frozen_during_warmup_only() {
    let (spec, orch) = world();
    let env = PpoEnv::new(
        &orch,
        spec.problems_in(Split::Train),
        EpisodeConfig {
            record_exchanges: false,
            ..EpisodeConfig::default()
        },
        3,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut state = PpoState::new(
        PolicyParams::init(64, 16, &mut rng),
        ValueParams::init(64, 16, &mut rng),
        1,
    );
    let initial = serde_json::to_vec(&state.policy).unwrap();
    let initial_value = serde_json::to_vec(&state.value).unwrap();
    let cfg = PpoConfig {
        total_env_steps: 1400,
        ..PpoConfig::default()
    };
    let mut seen = Vec::new();
    train_ppo(&env, &mut state, &cfg, |st, row, stats| {
        let same = serde_json::to_vec(&st.policy).unwrap() == initial;
        seen.push((row.step, same, stats.policy_frozen));
        Ok(())
    })
    .unwrap();
    assert!(seen.iter().any(|(step, _, _)| *step <= 1000));
    for (step, same, frozen) in &seen {
        if *step <= 1000 {
            assert!(*same && *frozen, "policy changed by step {step}");
        }
    }
    assert!(!seen.last().unwrap().1, "policy never updated after warmup");
    assert_ne!(serde_json::to_vec(&state.value).unwrap(), initial_value);
}

#[test]
fn divergent_update_is_rolled_back() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 8;
    let mut state = PpoState::new(
        PolicyParams::init(d, 4, &mut rng),
        ValueParams::init(d, 4, &mut rng),
        2,
    );
    let before = state.clone();
    let samples: Vec<Sample> = (0..8)
        .map(|i| Sample {
            obs: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            actions: (0..3)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            action_index: i % 3,
            // A stale, far too small behaviour log-probability makes every
            // ratio enormous.
            old_log_prob: -40.0,
            value_estimate: 0.0,
            advantage: if i % 2 == 0 { 1.0 } else { -1.0 },
            ret: 1.0,
        })
        .collect();
    let stats = update_networks(&mut state, &samples, &PpoConfig::default(), 5e-4, false).unwrap();
    assert!(stats.aborted);
    assert_eq!(state.policy, before.policy);
    assert_eq!(state.value, before.value);
    assert_eq!(state.policy_opt, before.policy_opt);
}

#[test]
fn linear_decay_midpoint() {
    let cfg = PpoConfig::default();
    assert!((cfg.lr_at(2500) - 2.5e-4).abs() < 1e-15);
}

#[test]
fn interrupted_training_resumes_bit_for_bit() {
    let (spec, orch) = world();
    let env = PpoEnv::new(
        &orch,
        spec.problems_in(Split::Train),
        EpisodeConfig {
            record_exchanges: false,
            ..EpisodeConfig::default()
        },
        8,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fresh = PpoState::new(
        PolicyParams::init(64, 16, &mut rng),
        ValueParams::init(64, 16, &mut rng),
        4,
    );
    let cfg = PpoConfig {
        total_env_steps: 1500,
        warmup_freeze_steps: 200,
        ..PpoConfig::default()
    };

    let mut straight = fresh.clone();
    let all_rows = train_ppo(&env, &mut straight, &cfg, |_, _, _| Ok(())).unwrap();

    let mut crashed = fresh;
    let mut rows = Vec::new();
    let err = train_ppo(&env, &mut crashed, &cfg, |st, row, _| {
        rows.push(row.clone());
        if st.updates == 5 {
            Err(coplanner::Error::Training("simulated crash".into()))
        } else {
            Ok(())
        }
    });
    assert!(err.is_err());
    // The state goes through the same serialization as a checkpoint.
    let saved = serde_json::to_string(&crashed).unwrap();
    let mut resumed: PpoState = serde_json::from_str(&saved).unwrap();
    rows.extend(train_ppo(&env, &mut resumed, &cfg, |_, _, _| Ok(())).unwrap());
    assert_eq!(resumed, straight);
    assert_eq!(rows, all_rows);
}
