mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ulda::augment::{DstimAlphas, Image, OperatorSet};
use ulda::episodes::{
    build_epoch, episode_at, sample_episode, sample_labeled_episode, EpisodeConfig, LabeledSet,
};

use common::{check_episode, random_pool};

fn cfg(n: usize, k: usize, m: usize) -> EpisodeConfig {
    EpisodeConfig {
        n_way: n,
        k_shot: k,
        m_query: m,
        episodes_per_epoch: 3,
    }
}

fn preset(name: &str) -> OperatorSet {
    OperatorSet::preset(name, DstimAlphas::default()).unwrap()
}

#[test]
fn identity_operators_copy_sources() {
    let pool = random_pool(6, 1, 5, 5, 1);
    let id = OperatorSet::identity();
    let ep = sample_episode(&pool, &cfg(2, 1, 1), &id, &id, 4).unwrap();
    for q in &ep.query {
        let s = ep.support.iter().find(|s| s.label == q.label).unwrap();
        assert_eq!(q.image, s.image);
        assert_eq!(&q.image, pool.image(q.source));
    }
}

#[test]
fn same_inputs_give_identical_episodes() {
    let pool = random_pool(20, 1, 8, 8, 2);
    let (a_s, a_q) = (preset("AA+TIMsub"), preset("R+TA+TIMadd"));
    let a = sample_episode(&pool, &cfg(5, 1, 5), &a_s, &a_q, 99).unwrap();
    let b = sample_episode(&pool, &cfg(5, 1, 5), &a_s, &a_q, 99).unwrap();
    assert_eq!(a, b);
    let c = sample_episode(&pool, &cfg(5, 1, 5), &a_s, &a_q, 100).unwrap();
    assert_ne!(a, c);
}

#[test]
fn epoch_episodes_regenerate_individually() {
    let pool = random_pool(20, 1, 8, 8, 3);
    let (a_s, a_q) = (preset("AA+TIMsub"), preset("R+TA+TIMadd"));
    let c = cfg(5, 1, 2);
    let batch = build_epoch(&pool, &c, &a_s, &a_q, 42).unwrap();
    assert_eq!(batch.len(), 3);
    assert_eq!(episode_at(&pool, &c, &a_s, &a_q, 42, 1).unwrap(), batch[1]);
    let seeds: std::collections::HashSet<u64> = batch.iter().map(|e| e.seed).collect();
    assert_eq!(seeds.len(), 3);
}

#[test]
fn fuzzed_episodes_keep_invariants() {
    let pool = random_pool(40, 1, 8, 8, 4);
    let sets = ["TA", "AA+TIMsub", "R+TA+TIMadd", "AA+R+TA+TIMadd+TIMsub"].map(preset);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..200 {
        let (n, m) = (rng.random_range(2..=10), rng.random_range(1..=10));
        let k = rng.random_range(1..=3);
        let a_s = &sets[rng.random_range(0..sets.len())];
        let a_q = &sets[rng.random_range(0..sets.len())];
        let ep = sample_episode(&pool, &cfg(n, k, m), a_s, a_q, i).unwrap();
        if let Err(e) = check_episode(&ep, &pool, n, k, m) {
            panic!("episode {i} ({n}-way {k}-shot {m}-query): {e}");
        }
    }
}

fn labeled(classes: usize, per_class: usize) -> LabeledSet {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for i in 0..per_class {
            // a unique pixel value per item makes items traceable
            let v = (c * per_class + i) as f32;
            images.push(Image::from_fn(1, 2, 2, |_, _, _| v));
            labels.push(c);
        }
    }
    let names = (0..classes).map(|c| format!("c{c}")).collect();
    LabeledSet::new(images, labels, names).unwrap()
}

#[test]
fn exact_capacity_uses_every_item_once() {
    let set = labeled(5, 4);
    let ep = sample_labeled_episode(&set, 5, 1, 3, 8).unwrap();
    let mut used: Vec<usize> = ep
        .support
        .iter()
        .map(|s| s.source)
        .chain(ep.query.iter().map(|q| q.source))
        .collect();
    used.sort_unstable();
    assert_eq!(used, (0..20).collect::<Vec<_>>());
}

#[test]
fn support_and_query_are_disjoint_per_class() {
    let set = labeled(8, 10);
    for seed in 0..100 {
        let ep = sample_labeled_episode(&set, 5, 2, 3, seed).unwrap();
        for s in &ep.support {
            assert!(ep.query.iter().all(|q| q.source != s.source));
        }
        for q in &ep.query {
            let class = set.labels()[q.source];
            assert!(ep
                .support
                .iter()
                .any(|s| s.label == q.label && set.labels()[s.source] == class));
        }
    }
}

#[test]
fn class_sampling_is_uniform() {
    let set = labeled(20, 2);
    let (n, draws) = (5usize, 10_000u64);
    let mut counts = vec![0f64; 20];
    for seed in 0..draws {
        let ep = sample_labeled_episode(&set, n, 1, 1, seed).unwrap();
        for s in &ep.support {
            counts[set.labels()[s.source]] += 1.0;
        }
    }
    // each class appears with probability p = N/20 per episode
    let p = n as f64 / 20.0;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (c, &k) in counts.iter().enumerate() {
        assert!(
            (k - mean).abs() <= 3.0 * sigma,
            "class {c}: {k} draws, expected {mean} ± {}",
            3.0 * sigma
        );
    }
}

#[test]
fn short_class_is_reported_by_name() {
    let mut set = labeled(5, 4);
    let images: Vec<Image> = set.images()[..19].to_vec();
    let labels = set.labels()[..19].to_vec();
    set = LabeledSet::new(images, labels, set.class_names().to_vec()).unwrap();
    let err = sample_labeled_episode(&set, 5, 1, 3, 0).unwrap_err();
    assert!(err.to_string().contains("c4"), "{err}");
}
