//! Binary checkpoints of the full training state.
//!
//! Layout (little-endian):
//! magic `LSLCKPT1`, version u32, config digest (32 bytes), step u64,
//! adam step u64, config JSON (u32 length + bytes), section count u32, then
//! per section: name (u16 length + bytes), record count u32, and per record:
//! name (u16 length + bytes), trainable u8, rank u8, dims u64 each, f32
//! values. A SHA-256 of everything before it closes the file.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::training::{AdamState, TrainState};

pub const MAGIC: &[u8; 8] = b"LSLCKPT1";
pub const VERSION: u32 = 1;

/// SHA-256 of the canonical JSON of a model configuration.
pub fn config_digest(cfg: &ModelConfig) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(json).into()
}

#[derive(Clone, Debug)]
pub struct Section {
    pub name: String,
    pub store: ParamStore<f32>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub adam_step: u64,
    pub sections: Vec<Section>,
}

const PARAMS: &str = "params";
const POLYAK: &str = "polyak";
const ADAM_M: &str = "adam.m";
const ADAM_V: &str = "adam.v";

fn moments_store(params: &ParamStore<f32>, moments: &[Tensor<f32>]) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    for (e, m) in params.entries().iter().filter(|e| e.trainable).zip(moments) {
        s.insert(e.name.clone(), m.clone(), true);
    }
    s
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        let p = &state.model.params;
        Self {
            config: state.model.config.clone(),
            step: state.step,
            adam_step: state.adam.step,
            sections: vec![
                Section {
                    name: PARAMS.into(),
                    store: p.clone(),
                },
                Section {
                    name: POLYAK.into(),
                    store: state.polyak.clone(),
                },
                Section {
                    name: ADAM_M.into(),
                    store: moments_store(p, &state.adam.m),
                },
                Section {
                    name: ADAM_V.into(),
                    store: moments_store(p, &state.adam.v),
                },
            ],
        }
    }

    pub fn section(&self, name: &str) -> Result<&ParamStore<f32>> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| &s.store)
            .ok_or_else(|| Error::Checkpoint(format!("missing section {name:?}")))
    }

    pub fn into_state(self) -> Result<TrainState> {
        let params = self.section(PARAMS)?.clone();
        let polyak = self.section(POLYAK)?.clone();
        let grab = |name: &str| -> Result<Vec<Tensor<f32>>> {
            let s = self.section(name)?;
            params
                .entries()
                .iter()
                .filter(|e| e.trainable)
                .map(|e| {
                    let m = s.require(&e.name).map_err(|_| Error::Checkpoint(format!("{name} lacks {}", e.name)))?;
                    if m.shape() != e.value.shape() {
                        return Err(Error::Checkpoint(format!("{name} shape mismatch for {}", e.name)));
                    }
                    Ok(m.clone())
                })
                .collect()
        };
        let adam = AdamState {
            step: self.adam_step,
            m: grab(ADAM_M)?,
            v: grab(ADAM_V)?,
        };
        check_against_config(&params, &self.config)?;
        Ok(TrainState {
            model: Model {
                config: self.config,
                params,
            },
            polyak,
            adam,
            step: self.step,
        })
    }

    /// Model with the raw or Polyak-averaged weights.
    pub fn model(&self, polyak: bool) -> Result<Model> {
        let params = self.section(if polyak { POLYAK } else { PARAMS })?.clone();
        check_against_config(&params, &self.config)?;
        Ok(Model {
            config: self.config.clone(),
            params,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&config_digest(&self.config));
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&self.adam_step.to_le_bytes());
        let json = serde_json::to_vec(&self.config)?;
        b.extend_from_slice(&(json.len() as u32).to_le_bytes());
        b.extend_from_slice(&json);
        b.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            put_name(&mut b, &s.name)?;
            b.extend_from_slice(&(s.store.len() as u32).to_le_bytes());
            for e in s.store.entries() {
                put_name(&mut b, &e.name)?;
                b.push(e.trainable as u8);
                b.push(e.value.rank() as u8);
                for &d in e.value.shape() {
                    b.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in e.value.data() {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = parse_header(bytes)?;
        let mut r = header.reader;
        let n_sections = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..n_sections {
            let name = r.name()?;
            let n = r.u32()?;
            let mut store = ParamStore::new();
            for _ in 0..n {
                let rec = r.name()?;
                let trainable = r.u8()? != 0;
                let rank = r.u8()? as usize;
                let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
                let len: usize = shape.iter().product();
                let raw = r.take(len.checked_mul(4).ok_or_else(|| corrupt("record size overflows"))?)?;
                let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                store.insert(rec, Tensor::new(shape, values).map_err(|_| corrupt("record shape"))?, trainable);
            }
            sections.push(Section { name, store });
        }
        if r.pos != r.end {
            return Err(corrupt("trailing bytes before the checksum"));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            adam_step: header.adam_step,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::atomic_write(path, &self.to_bytes()?)
    }

    /// Loads and, when `expected` is given, rejects a config mismatch.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let c = Self::from_bytes(&fsutil::read(path)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if let Some(cfg) = expected {
            if config_digest(cfg) != config_digest(&c.config) {
                return Err(Error::Checkpoint(format!(
                    "{}: model config digest {} differs from the configured {}",
                    path.display(),
                    hex::encode(config_digest(&c.config)),
                    hex::encode(config_digest(cfg))
                )));
            }
        }
        Ok(c)
    }
}

fn check_against_config(params: &ParamStore<f32>, cfg: &ModelConfig) -> Result<()> {
    let fresh = Model::init(cfg.clone(), 0)?;
    for e in fresh.params.entries() {
        match params.get(&e.name) {
            Some(t) if t.shape() == e.value.shape() => {}
            Some(t) => {
                return Err(Error::Checkpoint(format!(
                    "{} has shape {:?}, config implies {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("missing parameter {}", e.name))),
        }
    }
    Ok(())
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("corrupt or truncated checkpoint ({what})"))
}

fn put_name(b: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
    b.extend_from_slice(&len.to_le_bytes());
    b.extend_from_slice(name.as_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.end - self.pos < n {
            return Err(corrupt("unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("name is not UTF-8"))
    }
}

struct Header<'a> {
    config: ModelConfig,
    digest: [u8; 32],
    step: u64,
    adam_step: u64,
    reader: Reader<'a>,
}

fn parse_header(bytes: &[u8]) -> Result<Header<'_>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
    }
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(corrupt("file shorter than its header"));
    }
    let body_end = bytes.len() - 32;
    let digest: [u8; 32] = Sha256::digest(&bytes[..body_end]).into();
    if digest[..] != bytes[body_end..] {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
        end: body_end,
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let cfg_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let step = r.u64()?;
    let adam_step = r.u64()?;
    let n = r.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    if config_digest(&config) != cfg_digest {
        return Err(corrupt("embedded config does not match its digest"));
    }
    Ok(Header {
        config,
        digest: cfg_digest,
        step,
        adam_step,
        reader: r,
    })
}

/// Human-readable inventory of a checkpoint file, read from its records
/// without building a model.
pub fn describe(path: &Path) -> Result<String> {
    let bytes = fsutil::read(path)?;
    let h = parse_header(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut out = format!(
        "checkpoint {}\nformat LSLCKPT{VERSION}\nconfig digest {}\nstep {}\nadam step {}\nbottleneck {:?}\n",
        path.display(),
        hex::encode(h.digest),
        h.step,
        h.adam_step,
        h.config.bottleneck.mode
    );
    let mut r = h.reader;
    let n_sections = r.u32()?;
    for _ in 0..n_sections {
        let name = r.name()?;
        let n = r.u32()?;
        let mut total = 0usize;
        let mut lines = String::new();
        for _ in 0..n {
            let rec = r.name()?;
            let trainable = r.u8()? != 0;
            let rank = r.u8()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let len: usize = shape.iter().product();
            r.take(len * 4)?;
            total += len;
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            lines.push_str(&format!(
                "  {rec} [{}]{}\n",
                dims.join("x"),
                if trainable { "" } else { " fixed" }
            ));
        }
        out.push_str(&format!("section {name}: {n} records, {total} values\n{lines}"));
    }
    Ok(out)
}
