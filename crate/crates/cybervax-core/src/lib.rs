//! Proactive deepfake defence: vaccinate portraits with hidden recovery
//! payloads, neutralise face-region attacks back to the original, and
//! validate whether protection is present.
//!
//! The crate is organised bottom-up: imaging primitives and mask geometry,
//! a small reverse-mode autodiff core with the U-Net built on it, the
//! differentiable metrics that double as training losses, attack and
//! degradation models, synthetic data, the joint training loop, and the
//! deployment pipeline with its evaluation harness.

pub mod attacks;
pub mod data;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod masks;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod training;
pub mod util;

pub use error::{Error, Result};
