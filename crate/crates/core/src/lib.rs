//! SFB-net: a U-Net whose skip connections are filtered by windowed
//! cross-attention gates, with a transformer layer at the bottleneck.
//!
//! The crate carries its own tensor and reverse-mode autodiff engine, the
//! model and losses, a synthetic data pipeline, and the `sfbnet` CLI.

pub mod attention;
pub mod cli;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod sfb;

pub use error::{Error, Result};
