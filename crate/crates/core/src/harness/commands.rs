//! Command implementations. Each writes its artifacts plus the resolved
//! configuration and seed into its output directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::audio::{write_wav, FeatureKind, FeatureSequence};
use crate::decoder::Decoding;
use crate::error::{Error, Result};
use crate::eval::{
    abx_score, build_triplets, framewise_counts, slice_items, AbxItem, AbxReport, AlignmentTrack, TokenMap,
    TokenUtterance, LABEL_RATE,
};
use crate::fsutil;
use crate::harness::cache::{encode_features, FeatureCache};
use crate::harness::checkpoint::{self, config_digest, Checkpoint};
use crate::harness::config::{write_run_record, RunConfig};
use crate::harness::manifest::{Manifest, Split};
use crate::harness::pipeline::{self, Utterance};
use crate::harness::synth::write_corpus;
use crate::model::Model;
use crate::params::ParamStore;
use crate::probes::{frames_per_latent, probe_suite, ProbePoint, ProbeReport};
use crate::training::{initialize_from_data, train_step, SegmentSampler, StepLog, TrainState};

pub const LOSS_CSV: &str = "loss.csv";
pub const TIMING_CSV: &str = "timing.csv";
pub const CHECKPOINT: &str = "checkpoint.ckpt";

/// Settings shared by every command.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunContext {
    pub fn new(config: RunConfig, seed: u64, out: PathBuf) -> Result<Self> {
        let config = config.with_seed(seed);
        config.validate()?;
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        write_run_record(&out, &config, seed)?;
        Ok(Self { config, seed, out })
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.out.join(name);
        fsutil::atomic_write(&p, bytes)?;
        Ok(p)
    }
}

fn write_json(ctx: &RunContext, name: &str, v: &impl Serialize) -> Result<PathBuf> {
    ctx.write(name, (serde_json::to_string_pretty(v)? + "\n").as_bytes())
}

fn load_split(ctx: &RunContext, manifest: &Manifest, split: Option<Split>) -> Result<Vec<Utterance>> {
    if manifest.n_speakers() > ctx.config.model.n_speakers {
        return Err(Error::Config(format!(
            "manifest has {} speakers, model.n_speakers is {}",
            manifest.n_speakers(),
            ctx.config.model.n_speakers
        )));
    }
    let recs: Vec<_> = match split {
        Some(s) => manifest.split(s),
        None => manifest.records.iter().collect(),
    };
    if recs.is_empty() {
        return Err(Error::Data(format!("manifest has no {split:?} records")));
    }
    pipeline::load_utterances(manifest, &recs, &ctx.config.model, &FeatureCache::from_env())
}

/// Hex SHA-256 over every parameter's name and values.
pub fn params_hash(p: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for e in p.entries() {
        h.update(e.name.as_bytes());
        for v in e.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn eval_model(ctx: &RunContext, ckpt: &Path) -> Result<Model> {
    Checkpoint::load(ckpt, Some(&ctx.config.model))?.model(ctx.config.eval.polyak_weights)
}

pub fn synth_corpus(ctx: &RunContext) -> Result<Manifest> {
    let m = write_corpus(&ctx.config.synth, ctx.seed, &ctx.out)?;
    log::info!("wrote {} utterances to {}", m.records.len(), ctx.out.display());
    Ok(m)
}

#[derive(Serialize)]
struct FeatureIndex<'a> {
    id: &'a str,
    path: String,
    n_frames: usize,
    dim: usize,
    frame_rate: f64,
}

pub fn extract_features(ctx: &RunContext, manifest: &Path) -> Result<()> {
    let manifest = Manifest::load(manifest)?;
    let utts = load_split(ctx, &manifest, None)?;
    let dir = ctx.out.join("features");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut index = String::new();
    for u in &utts {
        let name = format!("features/{}.feat", u.record.id);
        ctx.write(&name, &encode_features(&u.features))?;
        index.push_str(&serde_json::to_string(&FeatureIndex {
            id: &u.record.id,
            path: name,
            n_frames: u.features.n_frames(),
            dim: u.features.dim,
            frame_rate: u.features.frame_rate,
        })?);
        index.push('\n');
    }
    ctx.write("features.jsonl", index.as_bytes())?;
    Ok(())
}

/// Loss rows of an earlier run in `out` up to and including `step`.
fn prior_loss_rows(out: &Path, step: u64) -> Result<Vec<String>> {
    let p = out.join(LOSS_CSV);
    if step == 0 || !p.exists() {
        return Ok(Vec::new());
    }
    let text = fsutil::read_string(&p)?;
    let rows: Vec<String> = text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step))
        .map(String::from)
        .collect();
    if rows.len() as u64 != step {
        log::warn!("{} covers {} of the {step} completed steps", p.display(), rows.len());
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub manifest: PathBuf,
    pub resume: Option<PathBuf>,
    pub checkpoint_every: u64,
}

pub fn train(ctx: &RunContext, args: &TrainArgs) -> Result<TrainState> {
    let cfg = &ctx.config;
    let manifest = Manifest::load(&args.manifest)?;
    let utts = load_split(ctx, &manifest, Some(Split::Train))?;
    let train: Vec<&Utterance> = utts.iter().collect();
    let (mut state, data) = match &args.resume {
        Some(p) => {
            let state = Checkpoint::load(p, Some(&cfg.model))?.into_state()?;
            let items = pipeline::train_items(&state.model, &train)?;
            let data = SegmentSampler::new(items, &cfg.model, cfg.train.segment_samples)?;
            log::info!("resuming from {} at step {}", p.display(), state.step);
            (state, data)
        }
        None => {
            let mut model = pipeline::init_model(&cfg.model, ctx.seed, &train)?;
            let items = pipeline::train_items(&model, &train)?;
            let data = SegmentSampler::new(items, &cfg.model, cfg.train.segment_samples)?;
            initialize_from_data(&mut model, &data, &cfg.train)?;
            (TrainState::new(model), data)
        }
    };
    let mut rows = prior_loss_rows(&ctx.out, state.step)?;
    let mut timing = vec!["step,wall_s".to_string()];
    let save = |state: &TrainState, rows: &[String]| -> Result<()> {
        let mut csv = String::from(StepLog::CSV_HEADER);
        csv.push('\n');
        for r in rows {
            csv.push_str(r);
            csv.push('\n');
        }
        ctx.write(LOSS_CSV, csv.as_bytes())?;
        Checkpoint::from_state(state).save(&ctx.out.join(CHECKPOINT))
    };
    let t0 = Instant::now();
    while state.step < cfg.train.steps {
        let log = train_step(&mut state, &data, &cfg.train)?;
        rows.push(log.csv_row());
        timing.push(format!("{},{:.3}", log.step, t0.elapsed().as_secs_f64()));
        if log.step % 50 == 0 || log.step == cfg.train.steps {
            log::info!("step {} loss {:.4} nll {:.4}", log.step, log.loss, log.nll);
        }
        if args.checkpoint_every > 0 && log.step % args.checkpoint_every == 0 {
            save(&state, &rows)?;
        }
    }
    save(&state, &rows)?;
    ctx.write(TIMING_CSV, (timing.join("\n") + "\n").as_bytes())?;
    Ok(state)
}

#[derive(Serialize)]
struct ProbeMeta {
    config_digest: String,
    weights: &'static str,
    params_sha256_before: String,
    params_sha256_after: String,
    utterances: usize,
    pool_steps: usize,
}

pub fn probe(ctx: &RunContext, manifest: &Path, ckpt: &Path) -> Result<ProbeReport> {
    let cfg = &ctx.config;
    let manifest = Manifest::load(manifest)?;
    let model = eval_model(ctx, ckpt)?;
    let before = params_hash(&model.params);
    let utts = load_split(ctx, &manifest, Some(Split::Train))?;
    let train: Vec<&Utterance> = utts.iter().collect();
    let genders = manifest.genders();
    let probe_utts = pipeline::probe_utterances(&model, &train, &genders)?;
    let pool = cfg
        .probe
        .pool_steps
        .unwrap_or(cfg.train.segment_samples / cfg.model.samples_per_latent());
    let report = probe_suite(
        &probe_utts,
        cfg.model.latent_rate(),
        pool,
        cfg.model.n_speakers,
        genders.len(),
        &cfg.probe,
        ctx.seed,
    )?;
    let after = params_hash(&model.params);
    if before != after {
        return Err(Error::Numeric("probe training changed model parameters".into()));
    }
    ctx.write("probes.csv", report.to_csv().as_bytes())?;
    write_json(
        ctx,
        "probe_meta.json",
        &ProbeMeta {
            config_digest: hex::encode(config_digest(&cfg.model)),
            weights: if cfg.eval.polyak_weights { "polyak" } else { "raw" },
            params_sha256_before: before,
            params_sha256_after: after,
            utterances: probe_utts.len(),
            pool_steps: pool,
        },
    )?;
    Ok(report)
}

pub fn export_tokens(ctx: &RunContext, manifest: &Path, ckpt: &Path) -> Result<PathBuf> {
    let manifest = Manifest::load(manifest)?;
    let model = eval_model(ctx, ckpt)?;
    let utts = load_split(ctx, &manifest, None)?;
    let refs: Vec<&Utterance> = utts.iter().collect();
    let recs = pipeline::export_tokens(&model, &refs)?;
    ctx.write("tokens.jsonl", pipeline::tokens_to_jsonl(&recs)?.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapReport {
    pub dev_utterances: usize,
    pub test_utterances: usize,
    pub frames: u64,
    pub correct: u64,
    pub accuracy: f64,
    /// Share of test frames carrying the most frequent test phone.
    pub majority_baseline: f64,
    pub tokens_mapped: usize,
}

pub fn map_tokens(ctx: &RunContext, manifest: &Path, tokens: &Path) -> Result<MapReport> {
    let manifest = Manifest::load(manifest)?;
    let recs = pipeline::tokens_from_jsonl(&fsutil::read_string(tokens)?)?;
    let rate = recs
        .first()
        .map(|r| r.token_rate)
        .ok_or_else(|| Error::Data("token file is empty".into()))?;
    if recs.iter().any(|r| r.token_rate != rate) {
        return Err(Error::Data("token records disagree on the token rate".into()));
    }
    let fpt = frames_per_latent(rate)?;
    let mut tracks: Vec<(Split, String, AlignmentTrack)> = Vec::new();
    for r in &recs {
        let m = manifest
            .records
            .iter()
            .find(|m| m.id == r.id)
            .ok_or_else(|| Error::Data(format!("token record {:?} not in manifest", r.id)))?;
        if m.split != r.split {
            return Err(Error::Data(format!("{}: split differs from the manifest", r.id)));
        }
        let a = manifest
            .alignment(m)?
            .ok_or_else(|| Error::Data(format!("{} has no alignment", r.id)))?;
        tracks.push((m.split, r.id.clone(), a));
    }
    let pick = |s: Split| -> Vec<TokenUtterance> {
        recs.iter()
            .zip(&tracks)
            .filter(|(_, t)| t.0 == s)
            .map(|(r, t)| TokenUtterance {
                tokens: &r.tokens,
                alignment: &t.2,
            })
            .collect()
    };
    let ids = |s: Split| -> BTreeSet<&str> { tracks.iter().filter(|t| t.0 == s).map(|t| t.1.as_str()).collect() };
    if !ids(Split::Dev).is_disjoint(&ids(Split::Test)) {
        return Err(Error::Data("dev and test utterances overlap".into()));
    }
    let (dev, test) = (pick(Split::Dev), pick(Split::Test));
    if test.is_empty() {
        return Err(Error::Data("no test utterances to score".into()));
    }
    let map = TokenMap::fit(&dev, fpt)?;
    let (correct, frames) = framewise_counts(&test, &map, fpt);
    let majority = majority_rate(&test);
    let report = MapReport {
        dev_utterances: dev.len(),
        test_utterances: test.len(),
        frames,
        correct,
        accuracy: correct as f64 / frames.max(1) as f64,
        majority_baseline: majority,
        tokens_mapped: map.map.len(),
    };
    ctx.write("token_map.csv", map.to_csv().as_bytes())?;
    write_json(ctx, "accuracy.json", &report)?;
    Ok(report)
}

fn majority_rate(utts: &[TokenUtterance]) -> f64 {
    let mut counts = std::collections::BTreeMap::<&str, u64>::new();
    let mut n = 0u64;
    for u in utts {
        for l in u.alignment.frame_labels(LABEL_RATE).into_iter().flatten() {
            *counts.entry(l).or_default() += 1;
            n += 1;
        }
    }
    counts.values().max().map_or(0.0, |&m| m as f64 / n.max(1) as f64)
}

/// Representation scored by the ABX command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbxSource {
    Model(ProbePoint),
    /// One-hot phone identity at the label rate.
    Oracle,
    /// Standardized log-mel frames at the label rate.
    LogMel,
}

impl AbxSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(AbxSource::Oracle),
            "log-mel" => Ok(AbxSource::LogMel),
            _ => ProbePoint::parse(s).map(AbxSource::Model),
        }
    }
}

/// One-hot phone frames at the label rate.
pub fn oracle_features(track: &AlignmentTrack, phones: &[String]) -> FeatureSequence {
    let labels = track.frame_labels(LABEL_RATE);
    let mut frames = vec![0.0f32; labels.len() * phones.len()];
    for (t, l) in labels.iter().enumerate() {
        if let Some(k) = l.and_then(|l| phones.iter().position(|p| p == l)) {
            frames[t * phones.len() + k] = 1.0;
        }
    }
    FeatureSequence::new(frames, phones.len(), LABEL_RATE, FeatureKind::Probe)
}

pub fn abx(
    ctx: &RunContext,
    manifest: &Path,
    ckpt: Option<&Path>,
    source: AbxSource,
    split: Split,
) -> Result<AbxReport> {
    let manifest = Manifest::load(manifest)?;
    let utts = load_split(ctx, &manifest, Some(split))?;
    let model = match (source, ckpt) {
        (AbxSource::Model(_), Some(c)) => Some(eval_model(ctx, c)?),
        (AbxSource::Model(p), None) => {
            return Err(Error::InvalidArgument(format!("--point {} needs --checkpoint", p.as_str())))
        }
        _ => None,
    };
    let phones: Vec<String> = utts
        .iter()
        .filter_map(|u| u.alignment.as_ref())
        .flat_map(|a| a.segments.iter().map(|s| s.phone.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut items: Vec<AbxItem> = Vec::new();
    for (i, u) in utts.iter().enumerate() {
        let Some(track) = &u.alignment else {
            log::warn!("{} has no alignment, left out of ABX", u.record.id);
            continue;
        };
        let seq = match (source, &model) {
            (AbxSource::Oracle, _) => oracle_features(track, &phones),
            (AbxSource::LogMel, _) => pipeline::label_rate_log_mel(&ctx.config.model, &u.wave)?,
            (AbxSource::Model(p), Some(m)) => {
                let out = m.probe_points(&pipeline::normalized(m, u)?)?;
                let t = p.select(&out);
                FeatureSequence::new(t.data().to_vec(), t.last_dim(), m.config.latent_rate(), FeatureKind::Probe)
            }
            (AbxSource::Model(_), None) => unreachable!("model loaded above"),
        };
        items.extend(slice_items(&seq, track, u.record.speaker_id, i));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let triplets = build_triplets(&items, ctx.config.eval.abx_max_per_cell, &mut rng);
    if triplets.is_empty() {
        return Err(Error::Data("no ABX triplets could be formed".into()));
    }
    let report = abx_score(&items, &triplets)?;
    ctx.write("abx.csv", report.to_csv().as_bytes())?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct GenerateArgs {
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub utterance: String,
    pub speaker: Option<usize>,
    pub samples: Option<usize>,
    pub argmax: bool,
}

pub fn generate(ctx: &RunContext, args: &GenerateArgs) -> Result<PathBuf> {
    let manifest = Manifest::load(&args.manifest)?;
    let rec = manifest
        .records
        .iter()
        .find(|r| r.id == args.utterance)
        .ok_or_else(|| Error::InvalidArgument(format!("no utterance {:?} in manifest", args.utterance)))?;
    let model = eval_model(ctx, &args.checkpoint)?;
    let u = pipeline::load_utterances(&manifest, &[rec], &ctx.config.model, &FeatureCache::from_env())?
        .pop()
        .expect("one record");
    let speaker = args.speaker.unwrap_or(rec.speaker_id);
    let feats = pipeline::normalized(&model, &u)?;
    let n = args.samples.unwrap_or(u.wave.samples.len());
    let mode = if args.argmax { Decoding::Argmax } else { Decoding::Sample };
    let wave = model.generate(&feats, speaker, n, mode, ctx.seed)?;
    let path = ctx.out.join("generated.wav");
    write_wav(&path, &wave)?;
    Ok(path)
}

pub fn describe(ckpt: &Path, out: Option<&Path>) -> Result<String> {
    let d = checkpoint::describe(ckpt)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fsutil::atomic_write(&dir.join("describe.txt"), d.as_bytes())?;
    }
    Ok(d)
}
