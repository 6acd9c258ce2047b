//! Audio I/O and the waveform, log-mel and MFCC representations.

mod features;
pub mod mulaw;
mod wav;

use serde::{Deserialize, Serialize};

pub use features::{
    deltas, hz_to_mel, mel_to_hz, normalize_utterance, FeatureConfig, FeatureExtractor, LOG_FLOOR,
    N_CEPSTRA,
};
pub use mulaw::{mu_law_decode, mu_law_encode};
pub use wav::{encode_wav, read_wav, to_pcm16, write_wav};

/// Mono signal with amplitudes in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    LogMel,
    Mfcc,
    Latent,
    Probe,
}

/// Time-major `T x D` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub frames: Vec<f32>,
    pub dim: usize,
    pub frame_rate: f64,
    pub kind: FeatureKind,
}

impl FeatureSequence {
    pub fn new(frames: Vec<f32>, dim: usize, frame_rate: f64, kind: FeatureKind) -> Self {
        assert!(dim > 0 && frames.len().is_multiple_of(dim), "frames must tile dim");
        Self {
            frames,
            dim,
            frame_rate,
            kind,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], frame_rate: f64, kind: FeatureKind) -> Self {
        let dim = rows.first().map_or(1, Vec::len);
        let frames = rows.iter().flatten().map(|&v| v as f32).collect();
        Self::new(frames, dim, frame_rate, kind)
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn slice(&self, start: usize, end: usize) -> FeatureSequence {
        Self::new(
            self.frames[start * self.dim..end * self.dim].to_vec(),
            self.dim,
            self.frame_rate,
            self.kind,
        )
    }
}
