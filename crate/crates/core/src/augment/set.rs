use std::fmt;

use rand::Rng;

use super::ops::{self, JitterRanges};
use super::policy::{self, NUM_POLICIES};
use super::Image;
use crate::error::{Error, Result};

/// One augmentation operator with its parameters.
///
/// `None` in `Rotate90::k` or `AutoAugmentLite::policy` means "draw
/// uniformly per application". `Traditional::pad = None` picks the padding
/// from the image height.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentOp {
    Identity,
    RandomCrop {
        pad: usize,
    },
    ColorJitter(JitterRanges),
    /// Random crop followed by color jitter, bound as one operator.
    Traditional {
        pad: Option<usize>,
        jitter: JitterRanges,
    },
    Rotate90 {
        k: Option<u8>,
    },
    AutoAugmentLite {
        policy: Option<usize>,
    },
    TimAdd {
        alpha: f32,
    },
    TimSub {
        alpha: f32,
    },
}

/// Default crop padding for a square-ish image of the given height.
pub fn default_crop_pad(height: usize) -> usize {
    match height {
        0..=20 => 2,
        21..=48 => 4,
        _ => 8,
    }
}

impl AugmentOp {
    pub fn traditional() -> Self {
        AugmentOp::Traditional {
            pad: None,
            jitter: JitterRanges::TRADITIONAL,
        }
    }

    pub fn rotation() -> Self {
        AugmentOp::Rotate90 { k: None }
    }

    pub fn auto_augment() -> Self {
        AugmentOp::AutoAugmentLite { policy: None }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AugmentOp::ColorJitter(r) | AugmentOp::Traditional { jitter: r, .. } => r.validate(),
            AugmentOp::Rotate90 { k: Some(k) } if k > 3 => {
                Err(Error::invalid(format!("Rotate90: k = {k} not in 0..=3")))
            }
            AugmentOp::AutoAugmentLite { policy: Some(p) } if p >= NUM_POLICIES => {
                Err(Error::invalid(format!(
                    "AutoAugmentLite: policy {p} out of range 0..{NUM_POLICIES}"
                )))
            }
            AugmentOp::TimAdd { alpha } | AugmentOp::TimSub { alpha }
                if !(alpha > 0.0 && alpha.is_finite()) =>
            {
                Err(Error::invalid(format!(
                    "DSTIM α must be positive, got {alpha}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Whether the operator mixes with a partner image.
    pub fn needs_partner(&self) -> bool {
        matches!(self, AugmentOp::TimAdd { .. } | AugmentOp::TimSub { .. })
    }

    pub fn is_rotation(&self) -> bool {
        matches!(self, AugmentOp::Rotate90 { .. })
    }

    /// Applies the operator. Returns the rotation label when a rotation fired.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        x: &Image,
        partner: Option<&Image>,
        rng: &mut R,
    ) -> Result<(Image, Option<u8>)> {
        let need = |name: &str| {
            partner.ok_or_else(|| {
                Error::invalid(format!("{name} requires a partner image from the same set"))
            })
        };
        Ok(match *self {
            AugmentOp::Identity => (x.clone(), None),
            AugmentOp::RandomCrop { pad } => (ops::random_crop(x, pad, rng)?, None),
            AugmentOp::ColorJitter(r) => (ops::color_jitter(x, &r, rng)?, None),
            AugmentOp::Traditional { pad, jitter } => {
                let pad = pad.unwrap_or_else(|| default_crop_pad(x.height()));
                let cropped = ops::random_crop(x, pad, rng)?;
                (ops::color_jitter(&cropped, &jitter, rng)?, None)
            }
            AugmentOp::Rotate90 { k } => {
                let k = k.unwrap_or_else(|| rng.random_range(0..4));
                let (img, label) = ops::rotate90(x, k)?;
                (img, Some(label))
            }
            AugmentOp::AutoAugmentLite { policy } => {
                let p = policy.unwrap_or_else(|| rng.random_range(0..NUM_POLICIES));
                (policy::auto_augment_lite(x, p, rng)?, None)
            }
            AugmentOp::TimAdd { alpha } => (ops::tim_add(x, need("TIM_add")?, alpha, rng)?, None),
            AugmentOp::TimSub { alpha } => (ops::tim_sub(x, need("TIM_sub")?, alpha, rng)?, None),
        })
    }
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentOp::Identity => write!(f, "Identity"),
            AugmentOp::RandomCrop { pad } => write!(f, "Crop(pad={pad})"),
            AugmentOp::ColorJitter(_) => write!(f, "Jitter"),
            AugmentOp::Traditional { .. } => write!(f, "TA"),
            AugmentOp::Rotate90 { k: None } => write!(f, "R"),
            AugmentOp::Rotate90 { k: Some(k) } => write!(f, "R{k}"),
            AugmentOp::AutoAugmentLite { policy: None } => write!(f, "AA"),
            AugmentOp::AutoAugmentLite { policy: Some(p) } => write!(f, "AA{p}"),
            AugmentOp::TimAdd { alpha } => write!(f, "TIMadd(α={alpha})"),
            AugmentOp::TimSub { alpha } => write!(f, "TIMsub(α={alpha})"),
        }
    }
}

/// Beta shape parameters for the two DSTIM operators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DstimAlphas {
    pub sub: f32,
    pub add: f32,
}

impl Default for DstimAlphas {
    fn default() -> Self {
        Self { sub: 0.8, add: 0.6 }
    }
}

/// A named, non-empty collection of operators. Each application draws one
/// member uniformly.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorSet {
    name: String,
    ops: Vec<AugmentOp>,
}

/// The support/query configurations compared in the augmentation ablation,
/// ordered by increasing expected distribution shift.
pub const DIVERSITY_LADDER: [(&str, &str); 9] = [
    ("TA", "TA"),
    ("AA", "AA"),
    ("TA", "AA"),
    ("AA", "TA"),
    ("AA", "R"),
    ("AA", "R+TA"),
    ("AA", "R+TIMadd"),
    ("AA+TIMsub", "R+TIMadd"),
    ("AA+TIMsub", "R+TA+TIMadd"),
];

impl OperatorSet {
    pub fn new(name: impl Into<String>, ops: Vec<AugmentOp>) -> Result<Self> {
        let name = name.into();
        if ops.is_empty() {
            return Err(Error::invalid(format!("operator set `{name}` is empty")));
        }
        for op in &ops {
            op.validate()?;
        }
        Ok(Self { name, ops })
    }

    /// Resolves a `+`-joined preset name such as `R+TA+TIMadd`.
    ///
    /// Tokens (case-insensitive): `TA`, `AA`, `R`, `TIMadd`, `TIMsub`,
    /// `Identity`, `Crop`, `Jitter`.
    pub fn preset(name: &str, alphas: DstimAlphas) -> Result<Self> {
        let mut ops = Vec::new();
        for token in name.split('+').map(str::trim) {
            let op = match token.to_ascii_lowercase().as_str() {
                "ta" => AugmentOp::traditional(),
                "aa" => AugmentOp::auto_augment(),
                "r" => AugmentOp::rotation(),
                "timadd" => AugmentOp::TimAdd { alpha: alphas.add },
                "timsub" => AugmentOp::TimSub { alpha: alphas.sub },
                "identity" | "id" => AugmentOp::Identity,
                "crop" => AugmentOp::RandomCrop { pad: 2 },
                "jitter" => AugmentOp::ColorJitter(JitterRanges::TRADITIONAL),
                _ => return Err(Error::UnknownPreset(name.to_string())),
            };
            if ops.contains(&op) {
                return Err(Error::UnknownPreset(format!("{name} (repeats `{token}`)")));
            }
            ops.push(op);
        }
        Self::new(name, ops)
    }

    pub fn identity() -> Self {
        Self {
            name: "Identity".into(),
            ops: vec![AugmentOp::Identity],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn ops(&self) -> &[AugmentOp] {
        &self.ops
    }

    pub fn contains_rotation(&self) -> bool {
        self.ops.iter().any(AugmentOp::is_rotation)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &AugmentOp {
        &self.ops[rng.random_range(0..self.ops.len())]
    }

    /// Members of `self` not present in `other`, by `(kind, params)` equality.
    pub fn difference<'a>(&'a self, other: &OperatorSet) -> Vec<&'a AugmentOp> {
        self.ops
            .iter()
            .filter(|op| !other.ops.contains(op))
            .collect()
    }
}

impl fmt::Display for OperatorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Both set differences are non-empty.
pub fn diverse(a_s: &OperatorSet, a_q: &OperatorSet) -> bool {
    !a_s.difference(a_q).is_empty() && !a_q.difference(a_s).is_empty()
}

/// Draws one member of `set` and applies it to `x`.
///
/// `partner` is consulted only when the drawn operator mixes images.
pub fn apply_set<R: Rng + ?Sized>(
    x: &Image,
    set: &OperatorSet,
    partner: Option<&Image>,
    rng: &mut R,
) -> Result<(Image, Option<u8>)> {
    set.sample(rng).apply(x, partner, rng)
}
