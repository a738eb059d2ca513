mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ulda::augment::ops::{add_lambda, sub_lambda};
use ulda::augment::policy::{apply_policy, posterize, Step, Transform, POLICY_TABLE};
use ulda::augment::{
    apply_set, auto_augment_lite, color_jitter, default_crop_pad, diverse, random_crop, rotate90,
    tim_add, AugmentOp, DstimAlphas, Image, JitterRanges, OperatorSet, DIVERSITY_LADDER,
};
use ulda::Error;

use common::{random_image, tim_add_violation, tim_sub_violation};

fn preset(name: &str) -> OperatorSet {
    OperatorSet::preset(name, DstimAlphas::default()).unwrap()
}

#[test]
fn dstim_invariants_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let alphas = DstimAlphas::default();
    for _ in 0..2000 {
        let a = random_image(&mut rng, 1, 6, 6);
        let b = random_image(&mut rng, 1, 6, 6);
        let la = add_lambda(alphas.add, &mut rng).unwrap();
        let ls = sub_lambda(alphas.sub, &mut rng).unwrap();
        assert_eq!(tim_add_violation(&a, &b, la), None);
        assert_eq!(tim_sub_violation(&a, &b, ls), None);
    }
}

#[test]
fn tim_add_never_lands_nearer_the_partner() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let a = random_image(&mut rng, 3, 5, 5);
        let b = random_image(&mut rng, 3, 5, 5);
        let out = tim_add(&a, &b, 0.6, &mut rng).unwrap();
        assert!(out.l2_distance(&a) <= out.l2_distance(&b));
    }
}

#[test]
fn crop_and_jitter_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_image(&mut rng, 3, 12, 12);
    for pad in [1, 2, 4] {
        assert_eq!(random_crop(&x, pad, &mut rng).unwrap().shape(), x.shape());
    }
    let wild = JitterRanges {
        brightness: (0.1, 3.0),
        contrast: (0.1, 3.0),
        saturation: (0.1, 3.0),
    };
    for _ in 0..200 {
        let y = color_jitter(&x, &wild, &mut rng).unwrap();
        assert!(y.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn disabled_policy_and_full_depth_posterize_are_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_image(&mut rng, 1, 8, 8);
    let off = [
        Step {
            transform: Transform::Invert,
            prob: 0.0,
            magnitude: 9,
        },
        Step {
            transform: Transform::ShearX,
            prob: 0.0,
            magnitude: 9,
        },
    ];
    assert_eq!(apply_policy(&x, &off, &mut rng), x);
    assert_eq!(posterize(&x, 8), x);
}

#[test]
fn augmentations_are_seed_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_image(&mut rng, 3, 10, 10);
    let p = random_image(&mut rng, 3, 10, 10);
    for i in 0..POLICY_TABLE.len() {
        let a = auto_augment_lite(&x, i, &mut ChaCha8Rng::seed_from_u64(i as u64)).unwrap();
        let b = auto_augment_lite(&x, i, &mut ChaCha8Rng::seed_from_u64(i as u64)).unwrap();
        assert_eq!(a, b);
    }
    let set = preset("AA+R+TA+TIMadd+TIMsub");
    for s in 0..50 {
        let a = apply_set(&x, &set, Some(&p), &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        let b = apply_set(&x, &set, Some(&p), &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn identity_and_rotation_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_image(&mut rng, 1, 6, 6);
    let (y, rot) = apply_set(&x, &OperatorSet::identity(), None, &mut rng).unwrap();
    assert_eq!((y, rot), (x.clone(), None));
    let r = preset("R");
    for _ in 0..100 {
        let (_, rot) = apply_set(&x, &r, None, &mut rng).unwrap();
        assert!(rot.is_some_and(|k| k < 4));
    }
}

#[test]
fn diversity_predicate_on_ladder() {
    assert!(!diverse(&preset("TA"), &preset("TA")));
    assert!(diverse(&preset("AA"), &preset("TA")));
    for (s, q) in DIVERSITY_LADDER {
        let expect = s != q;
        assert_eq!(diverse(&preset(s), &preset(q)), expect, "{s} | {q}");
    }
    // a strict superset is not diverse: one difference is empty
    assert!(!diverse(&preset("TA"), &preset("R+TA")));
}

#[test]
fn presets_resolve_case_insensitively_and_reject_unknowns() {
    assert_eq!(preset("r+ta+timadd").ops().len(), 3);
    assert!(matches!(
        OperatorSet::preset("TA+Blur", DstimAlphas::default()),
        Err(Error::UnknownPreset(_))
    ));
    assert!(OperatorSet::preset("TA+TA", DstimAlphas::default()).is_err());
}

#[test]
fn mixing_ops_need_a_partner() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_image(&mut rng, 1, 4, 4);
    let op = AugmentOp::TimAdd { alpha: 0.6 };
    assert!(op.needs_partner());
    assert!(op.apply(&x, None, &mut rng).is_err());
}

#[test]
fn traditional_pad_follows_image_size() {
    assert_eq!(default_crop_pad(16), 2);
    assert_eq!(default_crop_pad(28), 4);
    assert_eq!(default_crop_pad(84), 8);
}

#[test]
fn quarter_turn_transposes_extent() {
    let x = Image::zeros(1, 3, 5);
    let (y, k) = rotate90(&x, 1).unwrap();
    assert_eq!((y.height(), y.width(), k), (5, 3, 1));
    assert!(rotate90(&x, 4).is_err());
}
