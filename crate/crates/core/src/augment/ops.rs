//! Primitive augmentation operators.
//!
//! Every operator is a pure function of its input, its parameters and the
//! state of the random source it is handed.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::Image;
use crate::error::{Error, Result};

/// Zero-pads by `pad` on every side, then crops a window of the original
/// size at a uniformly random offset.
pub fn random_crop<R: Rng + ?Sized>(x: &Image, pad: usize, rng: &mut R) -> Result<Image> {
    if pad > x.height().min(x.width()) {
        return Err(Error::invalid(format!(
            "random_crop: pad {pad} exceeds image size {}x{}",
            x.height(),
            x.width()
        )));
    }
    let oy = rng.random_range(0..=2 * pad);
    let ox = rng.random_range(0..=2 * pad);
    Ok(crop_at(x, pad, oy, ox))
}

pub(crate) fn crop_at(x: &Image, pad: usize, oy: usize, ox: usize) -> Image {
    let (c, h, w) = x.shape();
    Image::from_fn(c, h, w, |ch, y, xx| {
        let sy = (y + oy) as isize - pad as isize;
        let sx = (xx + ox) as isize - pad as isize;
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            0.0
        } else {
            x.get(ch, sy as usize, sx as usize)
        }
    })
}

/// Closed factor ranges for [`color_jitter`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterRanges {
    pub brightness: (f32, f32),
    pub contrast: (f32, f32),
    pub saturation: (f32, f32),
}

impl JitterRanges {
    pub const IDENTITY: JitterRanges = JitterRanges {
        brightness: (1.0, 1.0),
        contrast: (1.0, 1.0),
        saturation: (1.0, 1.0),
    };

    /// `[0.6, 1.4]` for all three factors.
    pub const TRADITIONAL: JitterRanges = JitterRanges {
        brightness: (0.6, 1.4),
        contrast: (0.6, 1.4),
        saturation: (0.6, 1.4),
    };

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::invalid(format!(
                    "color_jitter: {name} range [{lo}, {hi}] must be positive and ordered"
                )));
            }
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>((lo, hi): (f32, f32), rng: &mut R) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Brightness, contrast and saturation jitter with factors drawn uniformly
/// from `ranges`. Saturation only applies to 3-channel images.
pub fn color_jitter<R: Rng + ?Sized>(
    x: &Image,
    ranges: &JitterRanges,
    rng: &mut R,
) -> Result<Image> {
    ranges.validate()?;
    let b = draw(ranges.brightness, rng);
    let c = draw(ranges.contrast, rng);
    let s = draw(ranges.saturation, rng);
    Ok(jitter_with_factors(x, b, c, s))
}

fn gray(x: &Image, y: usize, xx: usize) -> f32 {
    if x.channels() == 3 {
        0.299 * x.get(0, y, xx) + 0.587 * x.get(1, y, xx) + 0.114 * x.get(2, y, xx)
    } else {
        x.get(0, y, xx)
    }
}

/// Deterministic jitter: multiplicative brightness, contrast toward the mean
/// gray level, saturation toward per-pixel gray. Clamped to `[0, 1]` after
/// each stage.
pub fn jitter_with_factors(x: &Image, brightness: f32, contrast: f32, saturation: f32) -> Image {
    let mut out = x.map(|v| (v * brightness).clamp(0.0, 1.0));
    if contrast != 1.0 {
        let (h, w) = (out.height(), out.width());
        let mut mean = 0.0f64;
        for y in 0..h {
            for xx in 0..w {
                mean += gray(&out, y, xx) as f64;
            }
        }
        let mean = (mean / (h * w) as f64) as f32;
        out = out.map(|v| (mean + contrast * (v - mean)).clamp(0.0, 1.0));
    }
    if saturation != 1.0 && out.channels() == 3 {
        let src = out.clone();
        for y in 0..src.height() {
            for xx in 0..src.width() {
                let g = gray(&src, y, xx);
                for ch in 0..3 {
                    let v = g + saturation * (src.get(ch, y, xx) - g);
                    out.set(ch, y, xx, v.clamp(0.0, 1.0));
                }
            }
        }
    }
    out
}

/// Rotates counterclockwise by `k · 90°`. Returns the image and `k`, which is
/// the rotation-prediction target.
pub fn rotate90(x: &Image, k: u8) -> Result<(Image, u8)> {
    if k > 3 {
        return Err(Error::invalid(format!("rotate90: k = {k} not in 0..=3")));
    }
    let (c, h, w) = x.shape();
    let out = match k {
        0 => x.clone(),
        1 => Image::from_fn(c, w, h, |ch, y, xx| x.get(ch, xx, w - 1 - y)),
        2 => Image::from_fn(c, h, w, |ch, y, xx| x.get(ch, h - 1 - y, w - 1 - xx)),
        _ => Image::from_fn(c, w, h, |ch, y, xx| x.get(ch, h - 1 - xx, y)),
    };
    Ok((out, k))
}

/// `Beta(α, α)` via two Gamma draws.
pub fn sample_beta<R: Rng + ?Sized>(alpha: f32, rng: &mut R) -> Result<f32> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "Beta shape must be positive, got {alpha}"
        )));
    }
    let gamma = Gamma::new(alpha as f64, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let a = gamma.sample(rng);
    let b = gamma.sample(rng);
    if a + b == 0.0 {
        return Ok(0.5);
    }
    Ok((a / (a + b)) as f32)
}

/// Mixing weight for [`tim_add`]: `max(λ, 1−λ)` with `λ ~ Beta(α, α)`, so in `[0.5, 1]`.
pub fn add_lambda<R: Rng + ?Sized>(alpha: f32, rng: &mut R) -> Result<f32> {
    let l = sample_beta(alpha, rng)?;
    Ok(l.max(1.0 - l))
}

/// Mixing weight for [`tim_sub`]: `0.5 + max(λ, 1−λ)`, so in `[1, 1.5]`.
pub fn sub_lambda<R: Rng + ?Sized>(alpha: f32, rng: &mut R) -> Result<f32> {
    Ok(0.5 + add_lambda(alpha, rng)?)
}

/// `λ·x_i + (1−λ)·x_j` for a given `λ ∈ [0.5, 1]`.
pub fn tim_add_with(x_i: &Image, x_j: &Image, lambda: f32) -> Result<Image> {
    x_i.check_same_shape(x_j, "tim_add")?;
    if !(0.5..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!(
            "tim_add: λ = {lambda} outside [0.5, 1]"
        )));
    }
    let (l, m) = (lambda as f64, 1.0 - lambda as f64);
    let mut out = x_i.clone();
    // one rounding of a near-exact f64 value keeps each pixel inside [x_i, x_j]
    for (o, &b) in out.pixels_mut().iter_mut().zip(x_j.pixels()) {
        *o = (l * *o as f64 + m * b as f64) as f32;
    }
    Ok(out)
}

/// `λ·x_i − (1.5−λ)·x_j` for a given `λ ∈ [1, 1.5]`.
pub fn tim_sub_with(x_i: &Image, x_j: &Image, lambda: f32) -> Result<Image> {
    x_i.check_same_shape(x_j, "tim_sub")?;
    if !(1.0..=1.5).contains(&lambda) {
        return Err(Error::invalid(format!(
            "tim_sub: λ = {lambda} outside [1, 1.5]"
        )));
    }
    let (l, m) = (lambda as f64, 1.5 - lambda as f64);
    let mut out = x_i.clone();
    for (o, &b) in out.pixels_mut().iter_mut().zip(x_j.pixels()) {
        *o = (l * *o as f64 - m * b as f64) as f32;
    }
    Ok(out)
}

/// Task-internal additive mixing toward a partner image; keeps `x_i`'s label.
pub fn tim_add<R: Rng + ?Sized>(
    x_i: &Image,
    x_j: &Image,
    alpha: f32,
    rng: &mut R,
) -> Result<Image> {
    x_i.check_same_shape(x_j, "tim_add")?;
    let lambda = add_lambda(alpha, rng)?;
    tim_add_with(x_i, x_j, lambda)
}

/// Task-internal subtractive mixing away from a partner image; keeps `x_i`'s label.
pub fn tim_sub<R: Rng + ?Sized>(
    x_i: &Image,
    x_j: &Image,
    alpha: f32,
    rng: &mut R,
) -> Result<Image> {
    x_i.check_same_shape(x_j, "tim_sub")?;
    let lambda = sub_lambda(alpha, rng)?;
    tim_sub_with(x_i, x_j, lambda)
}
