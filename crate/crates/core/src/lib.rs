//! Speech latents learned by an encoder, a bottleneck and a WaveNet decoder, with probes and discriminability tests.
//!
//! The pipeline is: features ([`audio`]) -> residual conv [`encoder`] ->
//! one of three [`bottleneck`]s (AE, free-bits VAE, VQ-VAE) -> time jitter
//! and conditioning -> autoregressive mu-law WaveNet [`decoder`]. The
//! [`probes`] and [`eval`] modules analyse the learned representation and
//! [`harness`] ties everything into runnable experiments.

pub mod audio;
pub mod bottleneck;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
mod fsutil;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod params;
pub mod probes;
pub mod training;

pub use error::{Error, Result};
