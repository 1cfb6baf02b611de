//! Desk-scale vision-language prompt tuning laboratory.
//!
//! A frozen contrastive image/text backbone small enough to train on one
//! CPU core, plus learnable text prompts that are bridged into the visual
//! transformer layers and tuned on a handful of shots per class.

pub mod autodiff;
pub mod checkpoint;
pub mod clip;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod prompt;
pub mod rng;
pub mod tune;

pub use error::{Error, Result};
