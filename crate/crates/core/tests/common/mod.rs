//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ulda::augment::ops::{tim_add_with, tim_sub_with};
use ulda::augment::Image;
use ulda::episodes::{Episode, UnlabeledPool};

pub fn random_image(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> Image {
    Image::from_fn(c, h, w, |_, _, _| rng.random_range(0.0..1.0))
}

pub fn random_pool(n: usize, c: usize, h: usize, w: usize, seed: u64) -> UnlabeledPool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    UnlabeledPool::new((0..n).map(|_| random_image(&mut rng, c, h, w)).collect()).unwrap()
}

/// Cardinality, label-bijection and same-source-lineage checks of a pretext
/// episode. Returns the first violation.
pub fn check_episode(
    ep: &Episode,
    pool: &UnlabeledPool,
    n: usize,
    k: usize,
    m: usize,
) -> Result<(), String> {
    if ep.support.len() != n * k || ep.query.len() != n * m {
        return Err(format!(
            "cardinality: |S| = {}, |Q| = {} for N={n} K={k} M={m}",
            ep.support.len(),
            ep.query.len()
        ));
    }
    // label slot → source, with every slot used and every source distinct
    let mut source_of = vec![None; n];
    for (label, source) in ep
        .support
        .iter()
        .map(|s| (s.label, s.source))
        .chain(ep.query.iter().map(|q| (q.label, q.source)))
    {
        if label >= n {
            return Err(format!("label {label} outside 0..{n}"));
        }
        if source >= pool.len() {
            return Err(format!("source {source} outside the pool"));
        }
        match source_of[label] {
            None => source_of[label] = Some(source),
            Some(s) if s != source => {
                return Err(format!("label {label} mixes sources {s} and {source}"))
            }
            _ => {}
        }
    }
    let mut sources: Vec<usize> = source_of
        .iter()
        .map(|s| s.ok_or_else(|| "a label slot is unused".to_string()))
        .collect::<Result<_, _>>()?;
    sources.sort_unstable();
    sources.dedup();
    if sources.len() != n {
        return Err("two label slots share a source".into());
    }
    for l in 0..n {
        let ks = ep.support.iter().filter(|s| s.label == l).count();
        let ms = ep.query.iter().filter(|q| q.label == l).count();
        if ks != k || ms != m {
            return Err(format!("label {l} has {ks} support and {ms} query items"));
        }
    }
    let shape = pool.shape();
    if ep.support.iter().any(|s| s.image.shape() != shape)
        || ep.query.iter().any(|q| q.image.shape() != shape)
    {
        return Err("an item changed image shape".into());
    }
    Ok(())
}

/// Result of one DSTIM algebra draw; `None` when all invariants hold.
pub fn tim_add_violation(x_i: &Image, x_j: &Image, lambda: f32) -> Option<String> {
    if !(0.5..=1.0).contains(&lambda) {
        return Some(format!("add λ = {lambda} outside [0.5, 1]"));
    }
    let out = tim_add_with(x_i, x_j, lambda).unwrap();
    for ((&o, &a), &b) in out.pixels().iter().zip(x_i.pixels()).zip(x_j.pixels()) {
        if o < a.min(b) || o > a.max(b) {
            return Some(format!(
                "pixel {o} leaves segment [{a}, {b}] at λ = {lambda}"
            ));
        }
    }
    let (di, dj) = (out.l2_distance(x_i), out.l2_distance(x_j));
    if di > dj {
        return Some(format!(
            "mix is nearer x_j ({dj}) than x_i ({di}) at λ = {lambda}"
        ));
    }
    let span = x_i.l2_distance(x_j);
    let expect = (1.0 - lambda as f64) * span;
    if (di - expect).abs() > 1e-5 * (1.0 + span) {
        return Some(format!("‖x̃ − x_i‖ = {di}, expected {expect}"));
    }
    None
}

pub fn tim_sub_violation(x_i: &Image, x_j: &Image, lambda: f32) -> Option<String> {
    if !(1.0..=1.5).contains(&lambda) {
        return Some(format!("sub λ = {lambda} outside [1, 1.5]"));
    }
    let coef_j = 1.5 - lambda;
    if lambda < 1.0 || lambda < 2.0 * coef_j {
        return Some(format!("coefficients {lambda} / {coef_j} break dominance"));
    }
    let out = tim_sub_with(x_i, x_j, lambda).unwrap();
    for ((&o, &a), &b) in out.pixels().iter().zip(x_i.pixels()).zip(x_j.pixels()) {
        let exact = lambda as f64 * a as f64 - coef_j as f64 * b as f64;
        if (o as f64 - exact).abs() > 1e-6 {
            return Some(format!(
                "pixel {o} differs from λ·x_i − (1.5−λ)·x_j = {exact}"
            ));
        }
    }
    None
}
