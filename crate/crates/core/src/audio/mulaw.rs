//! 256-level mu-law companding (mu = 255) of amplitudes in [-1, 1].

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};

pub const MU: f64 = 255.0;
pub const LEVELS: usize = 256;
/// Level of amplitude 0.
pub const ZERO_LEVEL: usize = 128;

static CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

/// `sign(x) * ln(1 + mu|x|) / ln(1 + mu)`.
pub fn compand(x: f64) -> f64 {
    x.signum() * (MU * x.abs()).ln_1p() / MU.ln_1p()
}

pub fn expand(y: f64) -> f64 {
    y.signum() * ((MU.ln_1p() * y.abs()).exp() - 1.0) / MU
}

pub fn mu_law_encode(amplitude: f32) -> usize {
    let mut x = amplitude as f64;
    if !(-1.0..=1.0).contains(&x) {
        if !CLAMP_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!("mu-law input {x} outside [-1, 1]; clamping (reported once)");
        }
        x = x.clamp(-1.0, 1.0);
    }
    let y = compand(x);
    ((y + 1.0) / 2.0 * (LEVELS - 1) as f64 + 0.5).floor() as usize
}

/// Bin-centre amplitude of `level`.
pub fn mu_law_decode(level: usize) -> Result<f32> {
    if level >= LEVELS {
        return Err(Error::InvalidArgument(format!(
            "mu-law level {level} outside [0, {}]",
            LEVELS - 1
        )));
    }
    Ok(decode_unchecked(level) as f32)
}

pub(crate) fn decode_unchecked(level: usize) -> f64 {
    let y = 2.0 * level as f64 / (LEVELS - 1) as f64 - 1.0;
    expand(y)
}

pub fn encode_all(samples: &[f32]) -> Vec<usize> {
    samples.iter().map(|&s| mu_law_encode(s)).collect()
}
