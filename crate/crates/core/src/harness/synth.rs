//! Synthetic parallel corpus: phone strings rendered by several speakers,
//! with exact alignments.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestRecord, Split};
use crate::audio::{write_wav, Waveform};
use crate::error::{Error, Result};
use crate::eval::{AlignmentTrack, Segment};
use crate::fsutil;

#[derive(Clone, Copy, Debug)]
pub enum PhoneShape {
    /// Harmonic source through resonances at these frequencies (Hz).
    Voiced(&'static [f64]),
    /// Equal-amplitude random-phase partials in a band (Hz).
    Noise(f64, f64),
}

pub const PHONES: [(&str, PhoneShape); 5] = [
    ("a", PhoneShape::Voiced(&[750.0, 1250.0])),
    ("i", PhoneShape::Voiced(&[300.0, 2300.0])),
    ("u", PhoneShape::Voiced(&[320.0, 780.0])),
    ("m", PhoneShape::Voiced(&[250.0])),
    ("s", PhoneShape::Noise(2600.0, 3600.0)),
];

#[derive(Clone, Copy, Debug)]
pub struct SpeakerVoice {
    pub f0: f64,
    /// Formant scale.
    pub alpha: f64,
    pub gain: f64,
    /// Amplitude tremolo rate (Hz).
    pub tremolo: f64,
    pub gender: &'static str,
}

pub const VOICES: [SpeakerVoice; 6] = [
    SpeakerVoice { f0: 110.0, alpha: 1.0, gain: 0.5, tremolo: 3.0, gender: "M" },
    SpeakerVoice { f0: 220.0, alpha: 1.18, gain: 0.35, tremolo: 5.0, gender: "F" },
    SpeakerVoice { f0: 135.0, alpha: 0.92, gain: 0.6, tremolo: 7.0, gender: "M" },
    SpeakerVoice { f0: 190.0, alpha: 1.12, gain: 0.45, tremolo: 4.0, gender: "F" },
    SpeakerVoice { f0: 95.0, alpha: 0.88, gain: 0.55, tremolo: 6.0, gender: "M" },
    SpeakerVoice { f0: 240.0, alpha: 1.22, gain: 0.4, tremolo: 2.0, gender: "F" },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub n_speakers: usize,
    /// Scripts shared by all speakers; the first 60% train, the next 20%
    /// dev, the rest test.
    pub n_scripts: usize,
    pub phones_per_utterance: usize,
    pub min_phone_ms: u32,
    pub max_phone_ms: u32,
    pub fade_ms: f64,
    /// Relative depth of the sinusoidal f0 modulation.
    pub vibrato: f64,
    /// Amplitude of resonance-shaped aspiration noise relative to the
    /// harmonic part of voiced phones.
    pub breathiness: f64,
    /// Scales each speaker's formant shift away from 1; 0 gives all
    /// speakers the same vocal tract.
    pub formant_spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            n_speakers: 3,
            n_scripts: 20,
            phones_per_utterance: 10,
            min_phone_ms: 100,
            max_phone_ms: 250,
            fade_ms: 5.0,
            vibrato: 0.03,
            breathiness: 0.5,
            formant_spread: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.n_speakers > VOICES.len() {
            return Err(Error::Config(format!("n_speakers must be in 1..={}", VOICES.len())));
        }
        if self.n_scripts < 5 || self.phones_per_utterance < 3 {
            return Err(Error::Config("need at least 5 scripts of 3 phones".into()));
        }
        if self.min_phone_ms < 20 || self.min_phone_ms > self.max_phone_ms || !self.min_phone_ms.is_multiple_of(10) {
            return Err(Error::Config("phone durations must be multiples of 10 ms, at least 20".into()));
        }
        if !(0.0..0.2).contains(&self.vibrato) || !(0.0..=4.0).contains(&self.breathiness) {
            return Err(Error::Config("vibrato must lie in [0, 0.2) and breathiness in [0, 4]".into()));
        }
        if !(0.0..=2.0).contains(&self.formant_spread) {
            return Err(Error::Config("formant_spread must lie in [0, 2]".into()));
        }
        if self.sample_rate < 8000 || !self.sample_rate.is_multiple_of(100) {
            return Err(Error::Config("sample_rate must be a multiple of 100 Hz, at least 8 kHz".into()));
        }
        Ok(())
    }

    pub fn split_of(&self, script: usize) -> Split {
        let train = self.n_scripts * 3 / 5;
        let dev = self.n_scripts / 5;
        if script < train {
            Split::Train
        } else if script < train + dev {
            Split::Dev
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthUtterance {
    pub id: String,
    pub speaker: usize,
    pub script: usize,
    pub wave: Waveform,
    pub alignment: AlignmentTrack,
}

/// Phone index sequences, no phone repeated back to back.
pub fn scripts(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    (0..cfg.n_scripts)
        .map(|_| {
            let mut s: Vec<usize> = Vec::with_capacity(cfg.phones_per_utterance);
            while s.len() < cfg.phones_per_utterance {
                let p = rng.gen_range(0..PHONES.len());
                if s.last() != Some(&p) {
                    s.push(p);
                }
            }
            s
        })
        .collect()
}

fn resonance(f: f64, centers: &[f64], alpha: f64) -> f64 {
    centers
        .iter()
        .map(|&c| {
            let (c, bw) = (c * alpha, 80.0 + 0.06 * c * alpha);
            1.0 / (1.0 + ((f - c) / bw).powi(2))
        })
        .sum()
}

/// Per-utterance pitch contour: `f0 * (1 + depth * sin(2 pi rate t + psi))`.
#[derive(Clone, Copy, Debug)]
struct Pitch {
    f0: f64,
    depth: f64,
    rate: f64,
    psi: f64,
}

impl Pitch {
    /// Integrated phase (radians) of the fundamental at time `t`.
    fn phase(&self, t: f64) -> f64 {
        let w = 2.0 * PI * self.rate;
        2.0 * PI * self.f0 * (t - self.depth / w * ((w * t + self.psi).cos() - self.psi.cos()))
    }
}

/// Random-phase partials on a 10 Hz grid in `[lo, hi)` weighted by `weight`,
/// scaled to the RMS of a unit-norm harmonic sum.
fn noise_partials(lo: f64, hi: f64, weight: impl Fn(f64) -> f64, rng: &mut impl Rng) -> Vec<(f64, f64, f64)> {
    let mut p: Vec<(f64, f64, f64)> = (0..)
        .map(|k| lo + 10.0 * k as f64)
        .take_while(|&f| f < hi)
        .map(|f| (f, weight(f), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let norm = p.iter().map(|x| x.1 * x.1).sum::<f64>().sqrt().max(1e-9);
    for x in &mut p {
        x.1 /= norm;
    }
    p
}

fn partial_sum(p: &[(f64, f64, f64)], t: f64) -> f64 {
    p.iter().map(|&(f, a, ph)| a * (2.0 * PI * f * t + ph).sin()).sum()
}

/// Renders one phone of `n` samples starting at global sample `offset`.
/// Voiced phones keep harmonic phase continuous across the utterance.
#[allow(clippy::too_many_arguments)]
fn render_phone(
    shape: PhoneShape,
    voice: &SpeakerVoice,
    pitch: &Pitch,
    breathiness: f64,
    n: usize,
    offset: usize,
    sr: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let nyquist = 0.45 * sr;
    let mut out = vec![0.0; n];
    match shape {
        PhoneShape::Voiced(centers) => {
            let n_harm = (nyquist / (pitch.f0 * (1.0 + pitch.depth))) as usize;
            let amps: Vec<f64> = (1..=n_harm)
                .map(|k| resonance(k as f64 * pitch.f0, centers, voice.alpha))
                .collect();
            let norm = amps.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-9);
            let breath = if breathiness > 0.0 {
                noise_partials(50.0, nyquist, |f| resonance(f, centers, voice.alpha), rng)
            } else {
                Vec::new()
            };
            let mix = (1.0 + breathiness * breathiness).sqrt();
            for (i, o) in out.iter_mut().enumerate() {
                let t = (offset + i) as f64 / sr;
                let ph = pitch.phase(t);
                let harm = amps
                    .iter()
                    .enumerate()
                    .map(|(k, a)| a * ((k + 1) as f64 * ph).sin())
                    .sum::<f64>()
                    / norm;
                *o = (harm + breathiness * partial_sum(&breath, t)) / mix;
            }
        }
        PhoneShape::Noise(lo, hi) => {
            let (lo, hi) = (lo * voice.alpha.min(1.0), (hi * voice.alpha).min(nyquist));
            let partials = noise_partials(lo, hi, |_| 1.0, rng);
            for (i, o) in out.iter_mut().enumerate() {
                let t = (offset + i) as f64 / sr;
                *o = partial_sum(&partials, t);
            }
        }
    }
    out
}

/// All utterances: one per (speaker, script).
pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthUtterance>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scripts = scripts(cfg, &mut rng);
    let sr = cfg.sample_rate as f64;
    let fade = (cfg.fade_ms * sr / 1000.0).round() as usize;
    let mut out = Vec::new();
    for (spk, base) in VOICES.iter().enumerate().take(cfg.n_speakers) {
        let voice = &SpeakerVoice {
            alpha: 1.0 + cfg.formant_spread * (base.alpha - 1.0),
            ..*base
        };
        for (si, script) in scripts.iter().enumerate() {
            let mut urng = ChaCha8Rng::seed_from_u64(seed);
            urng.set_stream(1 + (spk * cfg.n_scripts + si) as u64);
            let pitch = Pitch {
                f0: voice.f0 * urng.gen_range(0.95..1.05),
                depth: cfg.vibrato,
                rate: urng.gen_range(4.0..6.0),
                psi: urng.gen_range(0.0..2.0 * PI),
            };
            let mut samples: Vec<f64> = Vec::new();
            let mut segments = Vec::new();
            for &p in script {
                let steps = urng.gen_range(cfg.min_phone_ms / 10..=cfg.max_phone_ms / 10);
                let n = (steps as usize) * cfg.sample_rate as usize / 100;
                let mut x = render_phone(
                    PHONES[p].1,
                    voice,
                    &pitch,
                    cfg.breathiness,
                    n,
                    samples.len(),
                    sr,
                    &mut urng,
                );
                for i in 0..fade.min(n / 2) {
                    let g = (i as f64 + 0.5) / fade as f64;
                    x[i] *= g;
                    x[n - 1 - i] *= g;
                }
                segments.push(Segment {
                    start: samples.len() as f64 / sr,
                    dur: n as f64 / sr,
                    phone: PHONES[p].0.to_string(),
                });
                samples.extend(x);
            }
            let wave = Waveform {
                samples: samples
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let t = i as f64 / sr;
                        let env = voice.gain * (1.0 + 0.2 * (2.0 * PI * voice.tremolo * t).sin());
                        (env * v).clamp(-0.99, 0.99) as f32
                    })
                    .collect(),
                sample_rate: cfg.sample_rate,
            };
            out.push(SynthUtterance {
                id: format!("spk{spk}_s{si:02}"),
                speaker: spk,
                script: si,
                wave,
                alignment: AlignmentTrack::new(segments)?,
            });
        }
    }
    Ok(out)
}

/// Writes `wav/`, `align/` and `manifest.jsonl` under `dir`.
pub fn write_corpus(cfg: &SynthConfig, seed: u64, dir: &Path) -> Result<Manifest> {
    let utts = synthesize(cfg, seed)?;
    let mut records = Vec::new();
    for u in &utts {
        let wav = Path::new("wav").join(format!("{}.wav", u.id));
        let ali = Path::new("align").join(format!("{}.tsv", u.id));
        write_wav(&dir.join(&wav), &u.wave)?;
        fsutil::atomic_write(&dir.join(&ali), u.alignment.to_tsv().as_bytes())?;
        records.push(ManifestRecord {
            id: u.id.clone(),
            wav_path: wav,
            speaker_id: u.speaker,
            gender: VOICES[u.speaker].gender.to_string(),
            alignment_path: Some(ali),
            split: cfg.split_of(u.script),
        });
    }
    let m = Manifest::new(dir.to_path_buf(), records)?;
    m.save(&dir.join("manifest.jsonl"))?;
    Ok(m)
}
