//! Feature-alignment knowledge distillation for small decoder-only
//! transformer language models.
//!
//! The crate bundles everything an end-to-end experiment needs: a minimal
//! reverse-mode autodiff engine, a causal transformer exposing per-layer
//! features and attention maps, the distillation objectives, Adam training
//! with checkpoints, a synthetic grammar corpus, and generation metrics.

pub mod autograd;
pub mod config;
pub mod data;
pub mod distillation;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
