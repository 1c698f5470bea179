//! Prototype-guided reconstruction anomaly detection, end to end: synthetic
//! dataset synthesis, a frozen patch encoder, an adaptive noisy bottleneck,
//! a dynamic bidirectional decoder with a prototype-based constraint, a
//! distance-weighted decay loss, and the standard detection metrics.
//!
//! All model math runs in `f64` on the [`proad_tensor`] autodiff engine.

pub mod attention;
pub mod bottleneck;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{ProadError, Result};

/// The concrete scalar type of the whole model stack.
pub type Tensor = proad_tensor::Tensor64;
