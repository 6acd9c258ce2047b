//! Browser bindings: mu-law companding, time-jitter sampling and log-mel
//! comparison of synthetic vowels.

use lsl_core::audio::mulaw::{compand, LEVELS};
use lsl_core::audio::{mu_law_decode, mu_law_encode, FeatureConfig, FeatureExtractor, Waveform};
use lsl_core::bottleneck::jitter_indices;
use lsl_core::eval::dtw_distance;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const SAMPLE_RATE: u32 = 8000;

fn js_err(e: lsl_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Companding curve on `n` points of [-1, 1], as interleaved
/// `(x, companded, decoded bin centre)` triples.
#[wasm_bindgen]
pub fn mu_law_curve(n: usize) -> Vec<f32> {
    let n = n.max(2);
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        let x = -1.0 + 2.0 * i as f32 / (n - 1) as f32;
        let level = mu_law_encode(x);
        out.push(x);
        out.push(compand(x as f64) as f32);
        out.push(mu_law_decode(level).unwrap_or(0.0));
    }
    out
}

/// Level of `x` and that level's decoded amplitude.
#[wasm_bindgen]
pub fn mu_law_round_trip(x: f32) -> Vec<f32> {
    let level = mu_law_encode(x);
    vec![level as f32, mu_law_decode(level).unwrap_or(0.0)]
}

#[wasm_bindgen]
pub fn mu_law_levels() -> usize {
    LEVELS
}

/// Source index of every latent position after time jitter with
/// probability `p`.
#[wasm_bindgen]
pub fn jitter(t: usize, p: f64, seed: u64) -> Result<Vec<u32>, JsError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(JsError::new("p must lie in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(jitter_indices(t, p, &mut rng).into_iter().map(|i| i as u32).collect())
}

/// Half a second of a vowel with formants `f1`, `f2` on pitch `f0`.
fn vowel(f0: f64, f1: f64, f2: f64) -> Waveform {
    let n = SAMPLE_RATE as usize / 2;
    let sr = SAMPLE_RATE as f64;
    let resonance = |f: f64, c: f64| 1.0 / (1.0 + ((f - c) / (0.1 * c + 50.0)).powi(2));
    let harmonics: Vec<(f64, f64)> = (1..)
        .map(|h| h as f64 * f0)
        .take_while(|&f| f < sr / 2.0 - 100.0)
        .map(|f| (f, resonance(f, f1) + 0.5 * resonance(f, f2)))
        .collect();
    let mut samples: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            harmonics
                .iter()
                .map(|&(f, a)| a * (2.0 * std::f64::consts::PI * f * t).sin())
                .sum::<f64>() as f32
        })
        .collect();
    let peak = samples.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
    samples.iter_mut().for_each(|v| *v *= 0.8 / peak);
    Waveform {
        samples,
        sample_rate: SAMPLE_RATE,
    }
}

fn extractor() -> Result<FeatureExtractor, JsError> {
    FeatureExtractor::new(FeatureConfig {
        sample_rate: SAMPLE_RATE,
        n_mels: 40,
        window_ms: 25.0,
        hop_ms: 10.0,
    })
    .map_err(js_err)
}

/// Log-mel spectrogram of a synthetic vowel; the first value is the
/// number of mel bands, the frames follow row by row.
#[wasm_bindgen]
pub fn vowel_log_mel(f0: f64, f1: f64, f2: f64) -> Result<Vec<f32>, JsError> {
    let seq = extractor()?.log_mel(&vowel(f0, f1, f2), false).map_err(js_err)?;
    let mut out = vec![seq.dim as f32];
    out.extend_from_slice(&seq.frames);
    Ok(out)
}

/// DTW distance between the log-mel spectrograms of two vowels.
#[wasm_bindgen]
pub fn vowel_dtw(a_f0: f64, a_f1: f64, a_f2: f64, b_f0: f64, b_f1: f64, b_f2: f64) -> Result<f64, JsError> {
    let ex = extractor()?;
    let a = ex.log_mel(&vowel(a_f0, a_f1, a_f2), false).map_err(js_err)?;
    let b = ex.log_mel(&vowel(b_f0, b_f1, b_f2), false).map_err(js_err)?;
    dtw_distance(&a, &b).map_err(js_err)
}
