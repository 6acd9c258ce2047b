//! The full autoencoder: input features, encoder, bottleneck, time jitter,
//! conditioning and WaveNet, plus evaluation-mode probe extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::mulaw::{decode_unchecked, encode_all};
use crate::audio::{
    normalize_utterance, FeatureConfig, FeatureExtractor, FeatureKind, FeatureSequence, Waveform,
};
use crate::bottleneck::{
    bits_to_nats, bottleneck, free_bits_penalty, time_jitter, BottleneckConfig, BottleneckMode,
};
use crate::decoder::{
    build_conditioning, generate, mixing_conv, reconstruction_nll, speaker_one_hot, Decoding,
    DecoderConfig,
};
use crate::encoder::{encode, EncoderConfig, InputKind};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureNorm {
    None,
    Utterance,
    /// Per-dimension statistics of the training set, stored with the model.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub features: FeatureConfig,
    pub log_mel_deltas: bool,
    pub feature_norm: FeatureNorm,
    pub encoder: EncoderConfig,
    pub bottleneck: BottleneckConfig,
    pub decoder: DecoderConfig,
    pub n_speakers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            log_mel_deltas: false,
            feature_norm: FeatureNorm::None,
            encoder: EncoderConfig::default(),
            bottleneck: BottleneckConfig::default(),
            decoder: DecoderConfig::default(),
            n_speakers: 1,
        }
    }
}

pub const NORM_MEAN: &str = "norm.mean";
pub const NORM_STD: &str = "norm.std";

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.bottleneck.validate()?;
        self.decoder.validate()?;
        if self.n_speakers == 0 {
            return Err(Error::Config("n_speakers must be positive".into()));
        }
        if self.features.hop_samples() == 0 || self.features.window_samples() < self.features.hop_samples() {
            return Err(Error::Config("feature window must cover at least one hop".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.encoder.input {
            InputKind::Waveform => 1,
            InputKind::Mfcc => 3 * crate::audio::N_CEPSTRA,
            InputKind::LogMel => self.features.n_mels * if self.log_mel_deltas { 3 } else { 1 },
        }
    }

    /// Waveform samples per encoder input frame.
    pub fn input_hop(&self) -> usize {
        match self.encoder.input {
            InputKind::Waveform => 1,
            _ => self.features.hop_samples(),
        }
    }

    /// Waveform samples per latent step (the conditioning repeat factor).
    pub fn samples_per_latent(&self) -> usize {
        self.input_hop() * self.encoder.downsample_factor()
    }

    pub fn latent_rate(&self) -> f64 {
        self.features.sample_rate as f64 / self.samples_per_latent() as f64
    }

    /// Encoder input for a whole utterance, one frame per `input_hop`
    /// samples, frame `j` centred on hop interval `j`. Not yet normalized.
    pub fn input_features(&self, extractor: &FeatureExtractor, wave: &Waveform) -> Result<FeatureSequence> {
        match self.encoder.input {
            InputKind::Waveform => Ok(FeatureSequence::new(
                wave.samples.clone(),
                1,
                wave.sample_rate as f64,
                FeatureKind::Probe,
            )),
            kind => {
                let padded = extractor.centered(wave);
                if kind == InputKind::Mfcc {
                    extractor.mfcc(&padded)
                } else {
                    extractor.log_mel(&padded, self.log_mel_deltas)
                }
            }
        }
    }
}

/// Model configuration plus its parameters (32-bit, as trained).
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = &config;
        c.encoder.init_params(&mut params, c.input_dim(), &mut rng);
        c.bottleneck.init_params(&mut params, c.encoder.width, &mut rng);
        c.decoder
            .init_params(&mut params, c.bottleneck.latent_dim, c.n_speakers, &mut rng);
        let d = c.input_dim();
        params.insert(NORM_MEAN, Tensor::zeros([d]), false);
        params.insert(NORM_STD, Tensor::full([d], 1.0), false);
        Ok(Self { config, params })
    }

    /// Stores per-dimension mean and standard deviation over `seqs`.
    pub fn fit_global_norm(&mut self, seqs: &[&FeatureSequence]) -> Result<()> {
        let d = self.config.input_dim();
        let mut sum = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        let mut n = 0usize;
        for s in seqs {
            if s.dim != d {
                return Err(Error::Data(format!("feature dim {} != {d}", s.dim)));
            }
            for t in 0..s.n_frames() {
                for (c, &v) in s.frame(t).iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            n += s.n_frames();
        }
        if n == 0 {
            return Err(Error::Data("no frames for feature statistics".into()));
        }
        let mean: Vec<f32> = sum.iter().map(|&s| (s / n as f64) as f32).collect();
        let std: Vec<f32> = sum
            .iter()
            .zip(&sq)
            .map(|(&s, &q)| {
                let m = s / n as f64;
                ((q / n as f64 - m * m).max(0.0).sqrt().max(1e-5)) as f32
            })
            .collect();
        self.params.insert(NORM_MEAN, Tensor::new([d], mean)?, false);
        self.params.insert(NORM_STD, Tensor::new([d], std)?, false);
        Ok(())
    }

    pub fn normalize(&self, seq: &mut FeatureSequence) -> Result<()> {
        match self.config.feature_norm {
            FeatureNorm::None => {}
            FeatureNorm::Utterance => normalize_utterance(seq),
            FeatureNorm::Global => {
                let mean = self.params.require(NORM_MEAN)?.data().to_vec();
                let std = self.params.require(NORM_STD)?.data().to_vec();
                for row in seq.frames.chunks_mut(seq.dim) {
                    for ((v, m), s) in row.iter_mut().zip(&mean).zip(&std) {
                        *v = (*v - m) / s;
                    }
                }
            }
        }
        Ok(())
    }

    /// Projected encoder vectors `[N, latent]` of normalized `[B, T, F]`
    /// features, before quantization.
    pub fn latent_vectors(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(features.clone());
        let h = encode(&mut g, &p, &self.config.encoder, x)?;
        let y = crate::bottleneck::project(&mut g, &p, h)?;
        let y = g.value(y).clone();
        let n = y.rows();
        y.reshape([n, self.config.bottleneck.latent_dim])
    }

    /// Data-dependent codebook initialization: the rows become distinct
    /// projected encoder vectors of `features` (normalized, `[B, T, F]`),
    /// chosen by `rng`. No-op outside VQ mode.
    pub fn init_codebook_from_data(&mut self, features: &Tensor<f32>, rng: &mut impl Rng) -> Result<()> {
        if self.config.bottleneck.mode != BottleneckMode::Vq {
            return Ok(());
        }
        let y = self.latent_vectors(features)?;
        let k = self.config.bottleneck.codebook_size;
        if y.rows() < k {
            return Err(Error::Data(format!(
                "codebook init needs {k} latent vectors, batch gives {}",
                y.rows()
            )));
        }
        let picks = rand::seq::index::sample(rng, y.rows(), k);
        let cb = self.params.get_mut("bn.codebook").expect("vq codebook exists");
        for (row, r) in cb.data_mut().chunks_mut(y.last_dim()).zip(picks.iter()) {
            row.copy_from_slice(y.row(r));
        }
        Ok(())
    }

    /// Replaces every codebook row that no vector of `features` selects with
    /// a randomly chosen vector of the batch. Returns the replaced rows.
    pub fn restart_dead_codes(&mut self, features: &Tensor<f32>, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.config.bottleneck.mode != BottleneckMode::Vq {
            return Ok(Vec::new());
        }
        let y = self.latent_vectors(features)?;
        let d = y.last_dim();
        let cb = self.params.get("bn.codebook").expect("vq codebook exists");
        let mut used = vec![false; cb.rows()];
        for id in crate::bottleneck::nearest_prototypes(y.data(), cb)? {
            used[id] = true;
        }
        let dead: Vec<usize> = (0..used.len()).filter(|&r| !used[r]).collect();
        let cb = self.params.get_mut("bn.codebook").expect("vq codebook exists");
        for &r in &dead {
            let src = rng.gen_range(0..y.rows());
            cb.data_mut()[r * d..(r + 1) * d].copy_from_slice(y.row(src));
        }
        Ok(dead)
    }

    /// Evaluation-mode representations of one normalized utterance.
    pub fn probe_points(&self, features: &FeatureSequence) -> Result<ProbeOutputs> {
        probe_points(&self.params, &self.config, features)
    }

    /// Latent-rate conditioning `[T', cond + n_speakers]` for generation.
    pub fn local_conditioning(&self, features: &FeatureSequence, speaker: usize) -> Result<Tensor<f32>> {
        let out = self.probe_points(features)?;
        let t = out.p_bn.shape()[0];
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let z = g.constant(out.p_bn.reshape([1, t, self.config.bottleneck.latent_dim])?);
        let c = build_conditioning(&mut g, &p, &self.config.decoder, z, &[speaker], self.config.n_speakers)?;
        let local = g.value(c.local).clone();
        let w = local.last_dim();
        local.reshape([t, w])
    }

    /// Decodes an utterance's latents (evaluation mode) into audio.
    pub fn generate(
        &self,
        features: &FeatureSequence,
        speaker: usize,
        n_samples: usize,
        mode: Decoding,
        seed: u64,
    ) -> Result<Waveform> {
        let local = self.local_conditioning(features, speaker)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = generate(
            &self.params,
            &self.config.decoder.wavenet,
            &local,
            self.config.samples_per_latent(),
            n_samples,
            mode,
            &mut rng,
        )?;
        Ok(Waveform {
            samples: levels.iter().map(|&l| decode_unchecked(l) as f32).collect(),
            sample_rate: self.config.features.sample_rate,
        })
    }
}

/// Representations at the four probe points, each `[T', dim]`.
#[derive(Clone, Debug)]
pub struct ProbeOutputs {
    pub p_enc: Tensor<f32>,
    pub p_proj: Tensor<f32>,
    pub p_bn: Tensor<f32>,
    pub p_cond: Tensor<f32>,
    pub token_ids: Option<Vec<usize>>,
}

pub fn probe_points(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    features: &FeatureSequence,
) -> Result<ProbeOutputs> {
    let t = features.n_frames();
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(Tensor::new([1, t, features.dim], features.frames.clone())?);
    let h = encode(&mut g, &p, &cfg.encoder, x)?;
    let bn = bottleneck::<f32, ChaCha8Rng>(&mut g, &p, &cfg.bottleneck, h, None)?;
    let c = mixing_conv(&mut g, &p, &cfg.decoder, bn.z_bn)?;
    let flat = |g: &Graph<f32>, v: Var| -> Result<Tensor<f32>> {
        let val = g.value(v).clone();
        let s = val.shape().to_vec();
        val.reshape([s[1], s[2]])
    };
    Ok(ProbeOutputs {
        p_enc: flat(&g, h)?,
        p_proj: flat(&g, bn.z_proj)?,
        p_bn: flat(&g, bn.z_bn)?,
        p_cond: flat(&g, c)?,
        token_ids: bn.token_ids,
    })
}

/// Loss weights and regularizer settings used while training.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSettings {
    pub commitment: f64,
    pub free_bits: f64,
    pub jitter_p: f64,
}

/// A training minibatch: `features: [B, frames, F]`, `targets` holds
/// `B * samples` mu-law levels row-major.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub features: Tensor<T>,
    pub targets: Vec<usize>,
    pub speakers: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn size(&self) -> usize {
        self.speakers.len()
    }
}

/// Graph handles of the loss components.
pub struct LossVars {
    pub total: Var,
    pub nll: Var,
    /// Free-bits KL penalty (VAE) or codebook term (VQ).
    pub kl_or_vq: Option<Var>,
    /// Unweighted commitment term (VQ).
    pub commit: Option<Var>,
    pub token_ids: Option<Vec<usize>>,
}

/// Graph for the training objective. `noise` drives VAE sampling and time
/// jitter; `None` means evaluation mode.
pub fn total_loss<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &Batch<T>,
    loss: &LossSettings,
    mut noise: Option<&mut R>,
) -> Result<LossVars> {
    let x = g.constant(batch.features.clone());
    let h = encode(g, p, &cfg.encoder, x)?;
    let bn = bottleneck(g, p, &cfg.bottleneck, h, noise.as_deref_mut())?;
    let z = match noise {
        Some(rng) if loss.jitter_p > 0.0 => time_jitter(g, bn.z_bn, loss.jitter_p, rng)?,
        _ => bn.z_bn,
    };
    let cond = build_conditioning(g, p, &cfg.decoder, z, &batch.speakers, cfg.n_speakers)?;
    let nll = reconstruction_nll(
        g,
        p,
        &cfg.decoder.wavenet,
        &batch.targets,
        batch.size(),
        cond.local,
        cfg.samples_per_latent(),
    )?;
    let (total, kl_or_vq, commit) = match cfg.bottleneck.mode {
        BottleneckMode::Ae => (nll, None, None),
        BottleneckMode::Vae => {
            let kl = bn.kl.expect("vae produces kl");
            let pen = free_bits_penalty(g, kl, bits_to_nats(loss.free_bits))?;
            (g.add(nll, pen)?, Some(pen), None)
        }
        BottleneckMode::Vq => {
            let vq = bn.vq_loss.expect("vq produces losses");
            let commit = bn.commit_loss.expect("vq produces losses");
            let wc = g.scale(commit, T::from_f64_lossy(loss.commitment));
            let t = g.add(nll, vq)?;
            (g.add(t, wc)?, Some(vq), Some(commit))
        }
    };
    Ok(LossVars {
        total,
        nll,
        kl_or_vq,
        commit,
        token_ids: bn.token_ids,
    })
}

/// Mu-law levels of a waveform.
pub fn waveform_levels(wave: &Waveform) -> Vec<u8> {
    encode_all(&wave.samples).into_iter().map(|l| l as u8).collect()
}

pub fn check_speaker(cfg: &ModelConfig, speaker: usize) -> Result<()> {
    speaker_one_hot::<f32>(&[speaker], 1, cfg.n_speakers).map(|_| ())
}
