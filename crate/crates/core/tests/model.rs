mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ulda::augment::{DstimAlphas, Image, OperatorSet};
use ulda::episodes::{sample_episode, EpisodeConfig};
use ulda::model::{
    classify_query, combine_losses, compute_prototypes, few_shot_loss, squared_distance,
    ModelConfig, ProtoNet,
};
use ulda::tensor::{Tape, Tensor};
use ulda::trainer::TrainConfig;

use common::random_pool;

const LN4: f64 = 1.386_294_361_119_890_6;

fn small(literal: bool) -> ModelConfig {
    ModelConfig {
        input: (1, 16, 16),
        filters: 8,
        blocks: 4,
        literal_scores: literal,
    }
}

#[test]
fn embedding_shape_duplicates_and_zero_image() {
    let model: ProtoNet<f32> = ProtoNet::new(small(false), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Image::from_fn(1, 16, 16, |_, _, _| rng.random_range(0.0..1.0));
    let zero = Image::zeros(1, 16, 16);
    let e = model.embed_frozen(&[&a, &a, &zero]).unwrap();
    assert_eq!(e.len(), 3);
    assert!(e.iter().all(|r| r.len() == model.embed_dim()));
    assert_eq!(e[0], e[1]);
    assert!(e[2].iter().all(|v| v.is_finite()));
    let again: ProtoNet<f32> = ProtoNet::new(small(false), 1).unwrap();
    assert_eq!(again.embed_frozen(&[&zero]).unwrap()[0], e[2]);
}

#[test]
fn frozen_embedding_ignores_batch_composition() {
    let model: ProtoNet<f32> = ProtoNet::new(small(false), 3).unwrap();
    let pool = random_pool(5, 1, 16, 16, 3);
    let all: Vec<&Image> = pool.images().iter().collect();
    let batch = model.embed_frozen(&all).unwrap();
    for (i, img) in all.iter().enumerate() {
        assert_eq!(model.embed_frozen(&[img]).unwrap()[0], batch[i]);
    }
}

#[test]
fn prototypes_against_mean_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 7;
    let e: Vec<Vec<f32>> = (0..3)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let p = compute_prototypes(&e, &[0, 0, 0], 1).unwrap();
    for j in 0..d {
        let oracle = (e[0][j] as f64 + e[1][j] as f64 + e[2][j] as f64) / 3.0;
        assert!((p[0][j] as f64 - oracle).abs() < 1e-6);
    }
    let single = compute_prototypes(&e[..1], &[0], 1).unwrap();
    assert_eq!(single[0], e[0]);
    let neg: Vec<f32> = e[0].iter().map(|v| -v).collect();
    let sym = compute_prototypes(&[e[0].clone(), neg], &[0, 0], 1).unwrap();
    assert!(sym[0].iter().all(|&v| v == 0.0));
}

#[test]
fn class_probabilities() {
    // equidistant prototypes give a uniform vector
    let q = vec![0.0f32, 0.0];
    let protos = vec![
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![-1.0, 0.0],
        vec![0.0, -1.0],
    ];
    let p = classify_query(&q, &protos).unwrap();
    assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    // a query on its prototype with the rest far away
    let far = vec![vec![0.0f32, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]];
    assert!(classify_query(&q, &far).unwrap()[0] > 0.99);
    assert_eq!(squared_distance(&[1.0, 2.0], &[4.0, 6.0]), 25.0);
}

fn loss_of(query: Vec<f64>, protos: Vec<f64>, q: usize, n: usize, labels: &[usize]) -> f64 {
    let d = query.len() / q;
    let mut tape = Tape::<f64>::new();
    let qv = tape
        .constant(Tensor::new(vec![q, d], query).unwrap())
        .unwrap();
    let pv = tape
        .constant(Tensor::new(vec![n, d], protos).unwrap())
        .unwrap();
    let (loss, _) = few_shot_loss(&mut tape, qv, pv, labels, false).unwrap();
    tape.value(loss).item()
}

#[test]
fn few_shot_loss_cases() {
    // all queries at the origin, prototypes on a circle
    let protos = vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0, 0.6, 0.8];
    let l = loss_of(vec![0.0; 6], protos, 3, 5, &[0, 3, 4]);
    assert!((l - 5f64.ln()).abs() < 1e-6);
    let protos = vec![0.0, 0.0, 10.0, 0.0, 0.0, 10.0];
    let l = loss_of(
        vec![0.0, 0.0, 10.0, 0.0, 0.0, 10.0],
        protos,
        3,
        3,
        &[0, 1, 2],
    );
    assert!(l < 0.01);
}

fn episode(query_set: &str) -> ulda::episodes::Episode {
    let pool = random_pool(10, 1, 16, 16, 5);
    let c = EpisodeConfig {
        n_way: 3,
        k_shot: 1,
        m_query: 2,
        episodes_per_epoch: 1,
    };
    let a = OperatorSet::preset("TA", DstimAlphas::default()).unwrap();
    let q = OperatorSet::preset(query_set, DstimAlphas::default()).unwrap();
    sample_episode(&pool, &c, &a, &q, 6).unwrap()
}

#[test]
fn rotation_loss_cases() {
    let mut model: ProtoNet<f64> = ProtoNet::new(small(false), 7).unwrap();
    // a zero head gives uniform rotation logits
    for p in model
        .store
        .iter_mut()
        .filter(|p| p.name.starts_with("rotation."))
    {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let ep = episode("R");
    let mut tape = Tape::new();
    let l = model.episode_losses(&mut tape, &ep, 1.0, true).unwrap();
    let rot = tape.value(l.rotation.unwrap()).item();
    assert!((rot - LN4).abs() < 1e-6);

    let ep = episode("TA");
    let mut tape = Tape::new();
    let l = model.episode_losses(&mut tape, &ep, 1.0, true).unwrap();
    assert!(l.rotation.is_none());
    assert_eq!(tape.value(l.total).item(), tape.value(l.few).item());
}

#[test]
fn one_hot_rotation_logits_give_vanishing_loss() {
    let mut tape = Tape::<f64>::new();
    let mut logits = vec![0.0; 8];
    logits[1] = 20.0;
    logits[4 + 3] = 20.0;
    let v = tape
        .constant(Tensor::new(vec![2, 4], logits).unwrap())
        .unwrap();
    let l = tape.softmax_cross_entropy(v, &[1, 3]).unwrap();
    assert!(tape.value(l).item() < 1e-6);
}

#[test]
fn zero_gamma_total_is_the_few_shot_loss() {
    let mut model: ProtoNet<f32> = ProtoNet::new(small(false), 8).unwrap();
    let ep = episode("R+TA+TIMadd");
    let mut tape = Tape::new();
    let l = model.episode_losses(&mut tape, &ep, 0.0, true).unwrap();
    assert_eq!(tape.value(l.total).item(), tape.value(l.few).item());
    assert_eq!(combine_losses(0.7, 123.0, 0.0).unwrap(), 0.7);
    assert_eq!(combine_losses(1.0, 0.5, 1.0).unwrap(), 1.5);
    assert_eq!(TrainConfig::default().gamma, 1.0);
}

#[test]
fn literal_scores_train_without_error() {
    let mut model: ProtoNet<f32> = ProtoNet::new(small(true), 9).unwrap();
    let ep = episode("R");
    let mut tape = Tape::new();
    let l = model.episode_losses(&mut tape, &ep, 1.0, true).unwrap();
    assert!(tape.value(l.total).item().is_finite());
    assert!(l.correct <= l.queries);
}

#[test]
fn save_load_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model: ProtoNet<f32> = ProtoNet::new(small(true), 10).unwrap();
    model.save(&path).unwrap();
    let back = ProtoNet::<f32>::load(&path).unwrap();
    assert_eq!(back.to_named_tensors(), model.to_named_tensors());
    assert_eq!(back.config(), model.config());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] ^= 0xFF;
    std::fs::write(&path, bytes).unwrap();
    assert!(ProtoNet::<f32>::load(&path).is_err());
}
