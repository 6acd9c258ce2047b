//! Log-mel filterbank and MFCC extraction.
//!
//! Per frame: Hann window, magnitude spectrum (FFT size = next power of two
//! at least the window length), HTK-scale triangular filters spanning
//! 0 Hz to Nyquist, then `ln(x + floor)`. MFCCs are the first 13 terms of
//! an orthonormal DCT-II of the log-mel frame, followed by regression deltas
//! (window +-2, edge replication) and deltas of deltas.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{FeatureKind, FeatureSequence, Waveform};

pub const LOG_FLOOR: f64 = 1e-10;
pub const N_CEPSTRA: usize = 13;
pub const DELTA_WINDOW: usize = 2;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            n_mels: 80,
            window_ms: 25.0,
            hop_ms: 10.0,
        }
    }
}

impl FeatureConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop_samples() as f64
    }

    pub fn fft_size(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    pub fn n_frames(&self, n_samples: usize) -> Option<usize> {
        let w = self.window_samples();
        (n_samples >= w).then(|| 1 + (n_samples - w) / self.hop_samples())
    }

    /// Centre frequency in Hz of each mel filter.
    pub fn mel_centers(&self) -> Vec<f64> {
        let top = hz_to_mel(self.sample_rate as f64 / 2.0);
        (1..=self.n_mels)
            .map(|i| mel_to_hz(top * i as f64 / (self.n_mels + 1) as f64))
            .collect()
    }
}

/// Reusable extractor holding the FFT plan, window and filterbank.
pub struct FeatureExtractor {
    config: FeatureConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    // (first fft bin, weights) per mel filter
    filters: Vec<(usize, Vec<f64>)>,
    dct: Vec<f64>,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        let w = config.window_samples();
        let hop = config.hop_samples();
        if w == 0 || hop == 0 || config.n_mels < N_CEPSTRA {
            return Err(Error::Config(format!(
                "feature config needs window, hop > 0 and n_mels >= {N_CEPSTRA}: {config:?}"
            )));
        }
        let n_fft = config.fft_size();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        // periodic Hann
        let window = (0..w)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / w as f64).cos())
            .collect();

        let n_bins = n_fft / 2 + 1;
        let sr = config.sample_rate as f64;
        let top = hz_to_mel(sr / 2.0);
        let edges: Vec<f64> = (0..config.n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (config.n_mels + 1) as f64))
            .collect();
        let filters = (0..config.n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * sr / n_fft as f64;
                        let v = if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        };
                        (v > 0.0).then_some((k, v))
                    })
                    .collect();
                match weights.first() {
                    Some(&(start, _)) => {
                        let end = weights.last().unwrap().0;
                        let mut dense = vec![0.0; end - start + 1];
                        for (k, v) in weights {
                            dense[k - start] = v;
                        }
                        (start, dense)
                    }
                    None => (0, Vec::new()),
                }
            })
            .collect();

        let n = config.n_mels;
        let mut dct = vec![0.0; N_CEPSTRA * n];
        for k in 0..N_CEPSTRA {
            let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            for i in 0..n {
                dct[k * n + i] =
                    scale * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n as f64).cos();
            }
        }
        Ok(Self {
            config,
            fft,
            window,
            filters,
            dct,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    /// `wave` zero-padded by `window - hop` split across both ends, so
    /// frame `j` is centred on the hop interval `[j * hop, (j + 1) * hop)`
    /// and an `n`-sample signal yields `n / hop` frames.
    pub fn centered(&self, wave: &Waveform) -> Waveform {
        let pad = self.config.window_samples().saturating_sub(self.config.hop_samples());
        let left = pad / 2;
        let mut samples = vec![0.0; left];
        samples.extend_from_slice(&wave.samples);
        samples.resize(samples.len() + pad - left, 0.0);
        Waveform {
            samples,
            sample_rate: wave.sample_rate,
        }
    }

    fn check(&self, wave: &Waveform) -> Result<usize> {
        if wave.sample_rate != self.config.sample_rate {
            return Err(Error::Data(format!(
                "waveform at {} Hz, extractor configured for {} Hz",
                wave.sample_rate, self.config.sample_rate
            )));
        }
        self.config.n_frames(wave.samples.len()).ok_or_else(|| {
            Error::Data(format!(
                "waveform of {} samples shorter than one {}-sample window",
                wave.samples.len(),
                self.config.window_samples()
            ))
        })
    }

    /// Log-mel energies as `T x n_mels` f64 rows.
    fn log_mel_rows(&self, wave: &Waveform) -> Result<Vec<Vec<f64>>> {
        let t = self.check(wave)?;
        let (w, hop, n_fft) = (
            self.config.window_samples(),
            self.config.hop_samples(),
            self.config.fft_size(),
        );
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut mags = vec![0.0; n_fft / 2 + 1];
        let mut rows = Vec::with_capacity(t);
        for f in 0..t {
            let start = f * hop;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < w {
                    Complex::new(wave.samples[start + i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (m, c) in mags.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            rows.push(
                self.filters
                    .iter()
                    .map(|(start, wts)| {
                        let e: f64 = wts.iter().zip(&mags[*start..]).map(|(a, b)| a * b).sum();
                        (e + LOG_FLOOR).ln()
                    })
                    .collect(),
            );
        }
        Ok(rows)
    }

    pub fn log_mel(&self, wave: &Waveform, add_deltas: bool) -> Result<FeatureSequence> {
        let rows = self.log_mel_rows(wave)?;
        let rows = if add_deltas { with_deltas(rows) } else { rows };
        Ok(FeatureSequence::from_rows(
            &rows,
            self.config.frame_rate(),
            FeatureKind::LogMel,
        ))
    }

    pub fn dct_frame(&self, log_mel: &[f64]) -> Vec<f64> {
        let n = self.config.n_mels;
        (0..N_CEPSTRA)
            .map(|k| {
                self.dct[k * n..(k + 1) * n]
                    .iter()
                    .zip(log_mel)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// 13 cepstra + deltas + delta-deltas (39 dims) at the hop rate.
    pub fn mfcc(&self, wave: &Waveform) -> Result<FeatureSequence> {
        let ceps: Vec<Vec<f64>> = self
            .log_mel_rows(wave)?
            .iter()
            .map(|r| self.dct_frame(r))
            .collect();
        Ok(FeatureSequence::from_rows(
            &with_deltas(ceps),
            self.config.frame_rate(),
            FeatureKind::Mfcc,
        ))
    }
}

/// Regression deltas over +-[`DELTA_WINDOW`] frames with edge replication.
pub fn deltas(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t = rows.len() as isize;
    if t == 0 {
        return Vec::new();
    }
    let d = rows[0].len();
    let norm: f64 = 2.0 * (1..=DELTA_WINDOW).map(|n| (n * n) as f64).sum::<f64>();
    let at = |i: isize| &rows[i.clamp(0, t - 1) as usize];
    (0..t)
        .map(|i| {
            (0..d)
                .map(|c| {
                    (1..=DELTA_WINDOW as isize)
                        .map(|n| n as f64 * (at(i + n)[c] - at(i - n)[c]))
                        .sum::<f64>()
                        / norm
                })
                .collect()
        })
        .collect()
}

fn with_deltas(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let d1 = deltas(&rows);
    let d2 = deltas(&d1);
    rows.into_iter()
        .zip(d1)
        .zip(d2)
        .map(|((mut r, a), b)| {
            r.extend(a);
            r.extend(b);
            r
        })
        .collect()
}

/// Per-utterance mean/variance normalization, in place.
pub fn normalize_utterance(seq: &mut FeatureSequence) {
    let (t, d) = (seq.n_frames(), seq.dim);
    if t == 0 {
        return;
    }
    for c in 0..d {
        let mean = (0..t).map(|i| seq.frames[i * d + c] as f64).sum::<f64>() / t as f64;
        let var = (0..t)
            .map(|i| (seq.frames[i * d + c] as f64 - mean).powi(2))
            .sum::<f64>()
            / t as f64;
        let inv = 1.0 / var.sqrt().max(1e-8);
        for i in 0..t {
            let v = &mut seq.frames[i * d + c];
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
}
