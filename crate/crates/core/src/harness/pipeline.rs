//! Corpus loading and the data preparation shared by the commands.

use serde::{Deserialize, Serialize};

use crate::audio::{normalize_utterance, read_wav, FeatureConfig, FeatureExtractor, FeatureSequence, Waveform};
use crate::error::{Error, Result};
use crate::eval::{AlignmentTrack, LABEL_RATE};
use crate::fsutil;
use crate::harness::cache::FeatureCache;
use crate::harness::config::feature_digest;
use crate::harness::manifest::{Manifest, ManifestRecord, Split};
use crate::model::{waveform_levels, Model, ModelConfig};
use crate::probes::ProbeUtterance;
use crate::training::TrainItem;

/// One manifest record with its audio, raw input features and alignment.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub record: ManifestRecord,
    pub wave: Waveform,
    pub features: FeatureSequence,
    pub alignment: Option<AlignmentTrack>,
}

pub fn load_utterances(
    manifest: &Manifest,
    records: &[&ManifestRecord],
    model: &ModelConfig,
    cache: &FeatureCache,
) -> Result<Vec<Utterance>> {
    let ex = FeatureExtractor::new(model.features.clone())?;
    let digest = feature_digest(model);
    records
        .iter()
        .map(|r| {
            if r.speaker_id >= model.n_speakers {
                return Err(Error::Data(format!(
                    "{}: speaker {} outside the model's {} speakers",
                    r.id, r.speaker_id, model.n_speakers
                )));
            }
            let path = manifest.wav_path(r);
            let wave = read_wav(&path, model.features.sample_rate)?;
            let key = FeatureCache::key(&fsutil::read(&path)?, &digest);
            let features = cache.get_or_compute(&key, || model.input_features(&ex, &wave))?;
            Ok(Utterance {
                record: (*r).clone(),
                wave,
                features,
                alignment: manifest.alignment(r)?,
            })
        })
        .collect()
}

pub fn split_of(utts: &[Utterance], split: Split) -> Vec<&Utterance> {
    utts.iter().filter(|u| u.record.split == split).collect()
}

/// Fresh model for `seed` with feature statistics fitted on `train`.
pub fn init_model(cfg: &ModelConfig, seed: u64, train: &[&Utterance]) -> Result<Model> {
    let mut m = Model::init(cfg.clone(), seed)?;
    let seqs: Vec<&FeatureSequence> = train.iter().map(|u| &u.features).collect();
    m.fit_global_norm(&seqs)?;
    Ok(m)
}

pub fn normalized(model: &Model, u: &Utterance) -> Result<FeatureSequence> {
    let mut f = u.features.clone();
    model.normalize(&mut f)?;
    Ok(f)
}

pub fn train_items(model: &Model, train: &[&Utterance]) -> Result<Vec<TrainItem>> {
    train
        .iter()
        .map(|u| {
            Ok(TrainItem {
                id: u.record.id.clone(),
                speaker: u.record.speaker_id,
                features: normalized(model, u)?,
                levels: waveform_levels(&u.wave),
            })
        })
        .collect()
}

/// Per-utterance standardized log-mel frames at the label rate, centred
/// like the alignment frames.
pub fn label_rate_log_mel(model: &ModelConfig, wave: &Waveform) -> Result<FeatureSequence> {
    let ex = FeatureExtractor::new(FeatureConfig {
        sample_rate: model.features.sample_rate,
        n_mels: model.features.n_mels,
        window_ms: 25.0,
        hop_ms: 1000.0 / LABEL_RATE,
    })?;
    let mut f = ex.log_mel(&ex.centered(wave), false)?;
    normalize_utterance(&mut f);
    Ok(f)
}

pub fn probe_utterances(model: &Model, utts: &[&Utterance], genders: &[String]) -> Result<Vec<ProbeUtterance>> {
    utts.iter()
        .map(|u| {
            let gender = genders
                .iter()
                .position(|g| *g == u.record.gender)
                .ok_or_else(|| Error::Data(format!("unknown gender {:?}", u.record.gender)))?;
            Ok(ProbeUtterance {
                outputs: model.probe_points(&normalized(model, u)?)?,
                speaker: u.record.speaker_id,
                gender,
                alignment: u.alignment.clone(),
                log_mel: label_rate_log_mel(&model.config, &u.wave)?,
            })
        })
        .collect()
}

/// One line of a token export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenRecord {
    pub id: String,
    pub split: Split,
    pub speaker_id: usize,
    pub token_rate: f64,
    pub tokens: Vec<usize>,
}

pub fn export_tokens(model: &Model, utts: &[&Utterance]) -> Result<Vec<TokenRecord>> {
    utts.iter()
        .map(|u| {
            let tokens = model.probe_points(&normalized(model, u)?)?.token_ids.ok_or_else(|| {
                Error::InvalidArgument("token export needs a vq bottleneck".into())
            })?;
            Ok(TokenRecord {
                id: u.record.id.clone(),
                split: u.record.split,
                speaker_id: u.record.speaker_id,
                token_rate: model.config.latent_rate(),
                tokens,
            })
        })
        .collect()
}

pub fn tokens_to_jsonl(records: &[TokenRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn tokens_from_jsonl(text: &str) -> Result<Vec<TokenRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("tokens line {}: {e}", n + 1))))
        .collect()
}
