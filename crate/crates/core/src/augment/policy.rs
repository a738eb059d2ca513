//! A fixed AutoAugment-style policy table.
//!
//! Sixteen sub-policies, each two `(transform, probability, magnitude)`
//! triples applied in order. Magnitudes run over `0..=10`; signed
//! transforms pick their sign uniformly at random.

use rand::Rng;

use super::ops::jitter_with_factors;
use super::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    Invert,
    Posterize,
    Solarize,
    Brightness,
    Contrast,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub transform: Transform,
    pub prob: f32,
    pub magnitude: u8,
}

const fn s(transform: Transform, prob: f32, magnitude: u8) -> Step {
    Step {
        transform,
        prob,
        magnitude,
    }
}

use Transform::*;

pub const POLICY_TABLE: [[Step; 2]; 16] = [
    [s(Posterize, 0.4, 8), s(Rotate, 0.6, 9)],
    [s(Solarize, 0.6, 5), s(Contrast, 0.6, 5)],
    [s(Posterize, 0.6, 7), s(Posterize, 0.6, 6)],
    [s(Contrast, 0.4, 4), s(Solarize, 0.2, 4)],
    [s(Contrast, 0.4, 6), s(Rotate, 0.8, 8)],
    [s(Solarize, 0.6, 3), s(Brightness, 0.6, 7)],
    [s(Posterize, 0.8, 5), s(Contrast, 1.0, 6)],
    [s(Rotate, 0.2, 3), s(Solarize, 0.6, 8)],
    [s(Rotate, 0.8, 8), s(Brightness, 0.4, 2)],
    [s(Rotate, 0.4, 9), s(Contrast, 0.6, 5)],
    [s(Invert, 0.6, 0), s(Contrast, 1.0, 7)],
    [s(Brightness, 0.6, 4), s(Contrast, 1.0, 8)],
    [s(ShearX, 0.6, 5), s(Contrast, 1.0, 6)],
    [s(ShearY, 0.8, 6), s(Invert, 0.4, 0)],
    [s(TranslateX, 0.6, 6), s(Solarize, 0.4, 5)],
    [s(TranslateY, 0.8, 5), s(Rotate, 0.6, 4)],
];

pub const NUM_POLICIES: usize = POLICY_TABLE.len();

/// Keeps the top `bits` bits of the 8-bit quantized value. `bits >= 8` is the identity.
pub fn posterize(x: &Image, bits: u8) -> Image {
    if bits >= 8 {
        return x.clone();
    }
    let mask = !0u8 << (8 - bits);
    x.map(|v| {
        let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        (q & mask) as f32 / 255.0
    })
}

pub fn solarize(x: &Image, threshold: f32) -> Image {
    x.map(|v| if v >= threshold { 1.0 - v } else { v })
}

pub fn invert(x: &Image) -> Image {
    x.map(|v| 1.0 - v)
}

/// Resamples through the inverse map `(y, x) -> src(y, x)`, zero-filled.
fn warp(x: &Image, src: impl Fn(f32, f32) -> (f32, f32)) -> Image {
    let (c, h, w) = x.shape();
    Image::from_fn(c, h, w, |ch, y, xx| {
        let (sy, sx) = src(y as f32, xx as f32);
        x.sample_bilinear(ch, sy, sx).clamp(0.0, 1.0)
    })
}

pub fn shear_x(x: &Image, k: f32) -> Image {
    let cy = (x.height() as f32 - 1.0) / 2.0;
    warp(x, |y, xx| (y, xx - k * (y - cy)))
}

pub fn shear_y(x: &Image, k: f32) -> Image {
    let cx = (x.width() as f32 - 1.0) / 2.0;
    warp(x, |y, xx| (y - k * (xx - cx), xx))
}

pub fn translate(x: &Image, dy: f32, dx: f32) -> Image {
    warp(x, |y, xx| (y - dy, xx - dx))
}

/// Counterclockwise rotation about the image center by `degrees`.
pub fn rotate_small(x: &Image, degrees: f32) -> Image {
    let (cy, cx) = (
        (x.height() as f32 - 1.0) / 2.0,
        (x.width() as f32 - 1.0) / 2.0,
    );
    let (sin, cos) = degrees.to_radians().sin_cos();
    // inverse of a CCW rotation in image coordinates (y grows downward)
    warp(x, |y, xx| {
        let (dy, dx) = (y - cy, xx - cx);
        (cy + cos * dy + sin * dx, cx - sin * dy + cos * dx)
    })
}

fn signed<R: Rng + ?Sized>(v: f32, rng: &mut R) -> f32 {
    if rng.random_bool(0.5) {
        v
    } else {
        -v
    }
}

/// Applies one transform at magnitude `m ∈ 0..=10`.
pub fn apply_transform<R: Rng + ?Sized>(x: &Image, t: Transform, m: u8, rng: &mut R) -> Image {
    let frac = m.min(10) as f32 / 10.0;
    match t {
        ShearX => shear_x(x, signed(0.3 * frac, rng)),
        ShearY => shear_y(x, signed(0.3 * frac, rng)),
        TranslateX => translate(x, 0.0, signed(0.45 * frac * x.width() as f32, rng)),
        TranslateY => translate(x, signed(0.45 * frac * x.height() as f32, rng), 0.0),
        Rotate => rotate_small(x, signed(30.0 * frac, rng)),
        Invert => invert(x),
        Posterize => posterize(x, 8 - (0.4 * m.min(10) as f32).round() as u8),
        Solarize => solarize(x, 1.0 - frac),
        Brightness => jitter_with_factors(x, 1.0 + signed(0.9 * frac, rng), 1.0, 1.0),
        Contrast => jitter_with_factors(x, 1.0, 1.0 + signed(0.9 * frac, rng), 1.0),
    }
}

/// Runs both steps of `policy`, each firing with its own probability.
pub fn apply_policy<R: Rng + ?Sized>(x: &Image, policy: &[Step; 2], rng: &mut R) -> Image {
    let mut out = x.clone();
    for step in policy {
        if step.prob > 0.0 && rng.random::<f32>() < step.prob {
            out = apply_transform(&out, step.transform, step.magnitude, rng);
        }
    }
    out
}

pub fn auto_augment_lite<R: Rng + ?Sized>(
    x: &Image,
    policy_index: usize,
    rng: &mut R,
) -> Result<Image> {
    let policy = POLICY_TABLE.get(policy_index).ok_or_else(|| {
        Error::invalid(format!(
            "auto_augment_lite: policy index {policy_index} out of range 0..{NUM_POLICIES}"
        ))
    })?;
    Ok(apply_policy(x, policy, rng))
}
