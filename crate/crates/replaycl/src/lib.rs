//! Continual learning with a shared conditional VAE, per-task private
//! VAEs + classifier heads, and generative replay.

pub mod ckpt;
pub mod continual;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod vae;

pub use error::{Error, Result};
