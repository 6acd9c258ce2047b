//! Run configuration: one JSON document with a section per module.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::FeatureConfig;
use crate::bottleneck::{BottleneckConfig, BottleneckMode, CodebookInit};
use crate::decoder::{DecoderConfig, WaveNetConfig};
use crate::encoder::{EncoderConfig, InputKind};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::harness::synth::SynthConfig;
use crate::model::{FeatureNorm, ModelConfig};
use crate::probes::{ProbeConfig, ProbePoint};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate the Polyak-averaged weights rather than the raw ones.
    pub polyak_weights: bool,
    /// Cap on ABX triplets per (phone pair, condition) cell.
    pub abx_max_per_cell: usize,
    pub abx_point: ProbePoint,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            polyak_weights: true,
            abx_max_per_cell: 200,
            abx_point: ProbePoint::PBn,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// The desk-scale VQ setup used on the synthetic corpus.
    pub fn desk() -> Self {
        let synth = SynthConfig::default();
        let model = ModelConfig {
            features: FeatureConfig {
                sample_rate: synth.sample_rate,
                n_mels: 40,
                window_ms: 25.0,
                hop_ms: 10.0,
            },
            log_mel_deltas: false,
            feature_norm: FeatureNorm::Global,
            encoder: EncoderConfig {
                input: InputKind::LogMel,
                width: 64,
                n_reduction_layers: 2,
                residual_init_gain: 0.3,
                ..Default::default()
            },
            bottleneck: BottleneckConfig {
                mode: BottleneckMode::Vq,
                latent_dim: 32,
                codebook_size: 64,
                codebook_init: CodebookInit::Data,
            },
            decoder: DecoderConfig {
                cond_width: 64,
                cond_filter: 3,
                wavenet: WaveNetConfig {
                    n_layers: 6,
                    cycle: 10,
                    residual_width: 32,
                    gate_width: 32,
                    skip_width: 32,
                    output_width: 64,
                    levels: 256,
                },
            },
            n_speakers: synth.n_speakers,
        };
        let train = TrainConfig {
            batch_size: 8,
            segment_samples: 2560,
            steps: 1000,
            milestones: vec![600, 800, 900],
            polyak_decay: 0.99,
            codebook_restart_every: 100,
            ..Default::default()
        };
        let probe = ProbeConfig {
            hidden: 256,
            steps: 2000,
            ..Default::default()
        };
        Self {
            synth,
            model,
            train,
            probe,
            eval: EvalConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fsutil::read_string(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate(&self.model)?;
        self.probe.validate()?;
        if self.eval.abx_max_per_cell == 0 {
            return Err(Error::Config("eval.abx_max_per_cell must be positive".into()));
        }
        Ok(())
    }

    /// The configuration with the run seed applied.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Digest identifying how input features are computed from a waveform.
pub fn feature_digest(model: &ModelConfig) -> [u8; 32] {
    let key = serde_json::json!({
        "features": model.features,
        "log_mel_deltas": model.log_mel_deltas,
        "input": model.encoder.input,
        "framing": "centered",
    });
    Sha256::digest(key.to_string().as_bytes()).into()
}

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const SEED_FILE: &str = "seed.txt";

/// Writes the resolved configuration and the seed into `dir`.
pub fn write_run_record(dir: &Path, cfg: &RunConfig, seed: u64) -> Result<()> {
    fsutil::atomic_write(&dir.join(RESOLVED_CONFIG), cfg.to_json().as_bytes())?;
    fsutil::atomic_write(&dir.join(SEED_FILE), format!("{seed}\n").as_bytes())
}
