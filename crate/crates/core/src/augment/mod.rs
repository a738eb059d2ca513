//! Image augmentation: traditional crop and jitter, quarter-turn rotation,
//! a fixed AutoAugment-style policy, and the task-internal mixing operators.
//!
//! Mixing outputs are deliberately left unclamped; use [`Image::clamped`]
//! only for rendering.

mod image;
pub mod ops;
pub mod policy;
mod set;

pub use image::Image;
pub use ops::{color_jitter, random_crop, rotate90, tim_add, tim_sub, JitterRanges};
pub use policy::auto_augment_lite;
pub use set::{
    apply_set, default_crop_pad, diverse, AugmentOp, DstimAlphas, OperatorSet, DIVERSITY_LADDER,
};
