mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use coplanner::bc::{
    accuracy, bc_pairs, collect_bc_trajectories, curriculum_filter, train_bc, BcConfig, BcPair,
    CollectConfig, DifficultyRecord,
};
use coplanner::checkpoint::Checkpoint;
use coplanner::gateway::{GenerateOptions, ScriptedWorld, WorldSpec};
use coplanner::nets::{policy_forward, PolicyParams};
use coplanner::orchestrator::{EpisodeConfig, Orchestrator};
use coplanner::{Error, MetaStrategy};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn world(per_class: usize, seed: u64) -> WorldSpec {
    WorldSpec::generate(&GenerateOptions {
        num_classes: 10,
        train_per_class: per_class,
        test_per_class: 0,
        required_len: 1,
        dim: 32,
        seed,
    })
}

fn quiet() -> EpisodeConfig {
    EpisodeConfig {
        record_exchanges: false,
        ..EpisodeConfig::default()
    }
}

#[test]
fn difficulty_matches_the_binomial_oracle() {
    // The opening move excludes Finish, so a random collector hits the single
    // required strategy with probability 1/9; later moves cannot undo it.
    let spec = world(20, 1);
    let problems = spec.problems();
    let o = Orchestrator::new(Arc::new(ScriptedWorld::new(spec).unwrap()));
    let (episodes, table) =
        collect_bc_trajectories(&o, &problems, &CollectConfig::default(), &quiet(), 9).unwrap();
    assert_eq!(episodes.len(), 200 * 32);
    assert_eq!(table.len(), 200);
    let mut total = 0u64;
    for (rec, chunk) in table.iter().zip(episodes.chunks(32)) {
        let wins = chunk.iter().filter(|e| e.correct).count() as u32;
        assert_eq!(rec.samples, 32);
        assert_eq!(rec.successes, wins);
        assert_eq!(rec.delta, f64::from(wins) / 32.0);
        assert!(chunk.iter().all(|e| e.problem_id == rec.problem_id));
        assert!(chunk.iter().all(|e| !e.rounds[0].is_finish()));
        total += u64::from(wins);
    }
    let (lo, hi) = common::binomial_interval(6400, 1.0 / 9.0, 0.99);
    assert!((lo..=hi).contains(&total), "{total} not in [{lo}, {hi}]");
}

#[test]
fn pairs_come_from_correct_unforced_decisions() {
    let spec = world(2, 2);
    let problems = spec.problems();
    let o = Orchestrator::new(Arc::new(ScriptedWorld::new(spec.clone()).unwrap()));
    let (episodes, _) =
        collect_bc_trajectories(&o, &problems, &CollectConfig::default(), &quiet(), 4).unwrap();
    let pairs = bc_pairs(&episodes);
    assert!(!pairs.is_empty());
    let embeddings = o.strategy_embeddings().unwrap();
    for p in &pairs {
        let ep = &episodes[p.episode];
        assert!(ep.correct);
        assert_eq!(ep.problem_id, p.problem_id);
        assert_eq!(p.action_embeddings.len(), 10);
        assert_eq!(p.action_embeddings, embeddings);
        assert_eq!(p.obs_embedding.len(), 32);
    }
    let forced: usize = episodes
        .iter()
        .filter(|e| e.correct)
        .map(|e| {
            e.transitions
                .iter()
                .filter(|t| t.num_candidates() == 1)
                .count()
        })
        .sum();
    let total: usize = episodes
        .iter()
        .filter(|e| e.correct)
        .map(|e| e.transitions.len())
        .sum();
    assert_eq!(pairs.len(), total - forced);

    // Every opening pair names the class's required strategy.
    let required: std::collections::HashMap<_, _> = spec
        .problems
        .iter()
        .map(|r| (r.problem.id.clone(), r.required[0]))
        .collect();
    let mut seen = BTreeSet::new();
    for p in &pairs {
        if seen.insert(p.episode) {
            assert_eq!(MetaStrategy::ALL[p.action_index], required[&p.problem_id]);
        }
    }
}

/// Pairs whose label is a fixed function of a noisy class centroid.
fn synthetic_pairs(n: usize, d: usize, random_labels: bool, seed: u64) -> Vec<BcPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    };
    let classes = 4;
    let centroids: Vec<Vec<f64>> = (0..classes).map(|_| unit(&mut rng)).collect();
    let actions: Vec<Vec<f64>> = (0..classes).map(|_| unit(&mut rng)).collect();
    (0..n)
        .map(|i| {
            let c = rng.gen_range(0..classes);
            let obs = centroids[c]
                .iter()
                .map(|x| x + rng.gen_range(-0.1..0.1))
                .collect();
            let label = if random_labels {
                rng.gen_range(0..classes)
            } else {
                (c + 1) % classes
            };
            BcPair {
                obs_embedding: obs,
                action_embeddings: actions.clone(),
                action_index: label,
                problem_id: format!("s{i}"),
                episode: i,
            }
        })
        .collect()
}

fn fast_cfg() -> BcConfig {
    BcConfig {
        lr: 1e-2,
        steps: 600,
        hidden: 16,
        eval_every: 50,
        ..BcConfig::default()
    }
}

#[test]
fn separable_pairs_are_learned() {
    let pairs = synthetic_pairs(500, 16, false, 3);
    let init = PolicyParams::init(16, 16, &mut ChaCha8Rng::seed_from_u64(0));
    let out = train_bc(&pairs, init, &fast_cfg(), 1).unwrap();
    assert!(out.val_accuracy >= 0.95, "{}", out.val_accuracy);
    assert_eq!(out.val_pairs, 50);
    assert_eq!(out.train_pairs, 450);
    let all: Vec<&BcPair> = pairs.iter().collect();
    assert!(accuracy(&out.params, &all).unwrap() >= 0.95);
    assert!(out.losses.last().unwrap() < &out.losses[0]);
}

#[test]
fn random_labels_stay_near_chance() {
    let pairs = synthetic_pairs(2000, 16, true, 4);
    let init = PolicyParams::init(16, 16, &mut ChaCha8Rng::seed_from_u64(0));
    let out = train_bc(&pairs, init, &fast_cfg(), 1).unwrap();
    // Held-out hits of a predictor independent of the labels are
    // Binomial(200, 1/4); selection over 13 checkpoints is covered by the
    // wide level.
    let (_, hi) = common::binomial_interval(200, 0.25, 0.999);
    let hits = (out.val_accuracy * 200.0).round() as u64;
    assert!(hits <= hi, "{hits} > {hi}");
}

#[test]
fn zero_steps_return_the_initial_parameters() {
    let pairs = synthetic_pairs(20, 8, false, 5);
    let init = PolicyParams::init(8, 4, &mut ChaCha8Rng::seed_from_u64(1));
    let cfg = BcConfig {
        steps: 0,
        ..fast_cfg()
    };
    let out = train_bc(&pairs, init.clone(), &cfg, 0).unwrap();
    assert_eq!(out.params, init);
    assert_eq!(out.best_step, 0);
    assert!(matches!(
        train_bc(&[], init, &cfg, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn checkpoint_reload_reproduces_outputs() {
    let pairs = synthetic_pairs(100, 8, false, 6);
    let init = PolicyParams::init(8, 4, &mut ChaCha8Rng::seed_from_u64(2));
    let out = train_bc(&pairs, init, &fast_cfg(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bc.ckpt.json");
    Checkpoint::from_policy(out.params.clone(), serde_json::json!({"stage": "bc"}))
        .save(&path)
        .unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.policy, out.params);
    for p in &pairs {
        let a = policy_forward(&out.params, &p.obs_embedding, &p.action_embeddings)
            .unwrap()
            .0;
        let b = policy_forward(&loaded.policy, &p.obs_embedding, &p.action_embeddings)
            .unwrap()
            .0;
        assert_eq!(a.probs, b.probs);
    }
}

#[test]
fn filter_keeps_exactly_the_inclusive_band() {
    let deltas = [0.00, 0.03, 0.05, 0.50, 0.90, 0.95, 1.00];
    let table: Vec<DifficultyRecord> = deltas
        .iter()
        .map(|d| {
            DifficultyRecord::new(format!("{d:.2}"), (d * 100.0_f64).round() as u32, 100).unwrap()
        })
        .collect();
    let kept = curriculum_filter(&table, 0.05, 0.90);
    let want: BTreeSet<String> = ["0.05", "0.50", "0.90"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    assert_eq!(kept, want);
}

fn table_strategy() -> impl Strategy<Value = Vec<DifficultyRecord>> {
    prop::collection::vec((0u32..=32, 1u32..=32), 0..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (s, n))| DifficultyRecord::new(format!("p{i}"), s.min(n), n).unwrap())
            .collect()
    })
}

proptest! {
    #[test]
    fn filter_is_monotone_and_idempotent(
        table in table_strategy(),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
        widen in 0.0f64..0.5,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let kept = curriculum_filter(&table, lo, hi);
        let wider = curriculum_filter(&table, lo - widen, hi + widen);
        prop_assert!(kept.is_subset(&wider));
        let survivors: Vec<DifficultyRecord> =
            table.iter().filter(|r| kept.contains(&r.problem_id)).cloned().collect();
        prop_assert_eq!(curriculum_filter(&survivors, lo, hi), kept.clone());
        for r in &table {
            prop_assert_eq!(kept.contains(&r.problem_id), lo <= r.delta && r.delta <= hi);
        }
    }
}
