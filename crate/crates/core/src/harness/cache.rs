//! On-disk cache of input features keyed by waveform content and feature
//! configuration.
//!
//! File layout (little-endian): magic `LSLFEAT1`, kind u8, frame rate f64,
//! frame count u64, dim u64, f32 values, SHA-256 of the preceding bytes.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::audio::{FeatureKind, FeatureSequence};
use crate::error::{Error, Result};
use crate::fsutil;

pub const CACHE_ENV: &str = "LSL_CACHE_DIR";
const MAGIC: &[u8; 8] = b"LSLFEAT1";

fn kind_code(k: FeatureKind) -> u8 {
    match k {
        FeatureKind::LogMel => 0,
        FeatureKind::Mfcc => 1,
        FeatureKind::Latent => 2,
        FeatureKind::Probe => 3,
    }
}

fn kind_from(c: u8) -> Option<FeatureKind> {
    Some(match c {
        0 => FeatureKind::LogMel,
        1 => FeatureKind::Mfcc,
        2 => FeatureKind::Latent,
        3 => FeatureKind::Probe,
        _ => return None,
    })
}

pub fn encode_features(seq: &FeatureSequence) -> Vec<u8> {
    let mut b = Vec::with_capacity(41 + seq.frames.len() * 4);
    b.extend_from_slice(MAGIC);
    b.push(kind_code(seq.kind));
    b.extend_from_slice(&seq.frame_rate.to_le_bytes());
    b.extend_from_slice(&(seq.n_frames() as u64).to_le_bytes());
    b.extend_from_slice(&(seq.dim as u64).to_le_bytes());
    for v in &seq.frames {
        b.extend_from_slice(&v.to_le_bytes());
    }
    let d = Sha256::digest(&b);
    b.extend_from_slice(&d);
    b
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence> {
    let bad = |w: &str| Error::Data(format!("corrupt feature file ({w})"));
    if bytes.len() < 8 + 1 + 24 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("bad header"));
    }
    let body = &bytes[..bytes.len() - 32];
    if Sha256::digest(body)[..] != bytes[body.len()..] {
        return Err(bad("checksum mismatch"));
    }
    let kind = kind_from(body[8]).ok_or_else(|| bad("unknown kind"))?;
    let f64_at = |o: usize| f64::from_le_bytes(body[o..o + 8].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(body[o..o + 8].try_into().unwrap()) as usize;
    let (rate, n, dim) = (f64_at(9), u64_at(17), u64_at(25));
    let values = &body[33..];
    if dim == 0 || n.checked_mul(dim).and_then(|x| x.checked_mul(4)) != Some(values.len()) {
        return Err(bad("size mismatch"));
    }
    let frames = values
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureSequence::new(frames, dim, rate, kind))
}

#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: Option<PathBuf>,
}

impl FeatureCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir }
    }

    /// Enabled when the cache directory variable is set and nonempty.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn key(wav_bytes: &[u8], feature_digest: &[u8; 32]) -> String {
        let mut h = Sha256::new();
        h.update(Sha256::digest(wav_bytes));
        h.update(feature_digest);
        hex::encode(h.finalize())
    }

    /// Cached features for `key`, computing and storing them on a miss.
    /// Unreadable entries are recomputed and overwritten.
    pub fn get_or_compute(
        &self,
        key: &str,
        compute: impl FnOnce() -> Result<FeatureSequence>,
    ) -> Result<FeatureSequence> {
        let Some(dir) = &self.dir else { return compute() };
        let path = dir.join(format!("{key}.feat"));
        if path.exists() {
            match fsutil::read(&path).and_then(|b| decode_features(&b)) {
                Ok(f) => return Ok(f),
                Err(e) => log::warn!("recomputing cache entry {}: {e}", path.display()),
            }
        }
        let f = compute()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fsutil::atomic_write(&path, &encode_features(&f))?;
        Ok(f)
    }
}
