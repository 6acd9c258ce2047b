//! JSON Lines dataset manifests.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::AlignmentTrack;
use crate::fsutil;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub wav_path: PathBuf,
    pub speaker_id: usize,
    pub gender: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment_path: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// Checks unique ids, dense speaker ids and one gender per speaker.
    pub fn new(root: PathBuf, records: Vec<ManifestRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("manifest has no records".into()));
        }
        let mut ids = BTreeSet::new();
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate manifest id {:?}", r.id)));
            }
        }
        let n = records.iter().map(|r| r.speaker_id).max().unwrap() + 1;
        let seen: BTreeSet<usize> = records.iter().map(|r| r.speaker_id).collect();
        if seen.len() != n {
            return Err(Error::Data(format!("speaker ids must be dense in 0..{n}")));
        }
        for s in 0..n {
            let g: BTreeSet<&str> = records
                .iter()
                .filter(|r| r.speaker_id == s)
                .map(|r| r.gender.as_str())
                .collect();
            if g.len() != 1 {
                return Err(Error::Data(format!("speaker {s} has genders {g:?}")));
            }
        }
        Ok(Self { root, records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fsutil::read_string(path)?;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), n + 1)))?;
            records.push(r);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(root, records)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::atomic_write(path, self.to_jsonl()?.as_bytes())
    }

    pub fn n_speakers(&self) -> usize {
        self.records.iter().map(|r| r.speaker_id).max().unwrap() + 1
    }

    /// Distinct genders in sorted order.
    pub fn genders(&self) -> Vec<String> {
        let g: BTreeSet<&str> = self.records.iter().map(|r| r.gender.as_str()).collect();
        g.into_iter().map(String::from).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn wav_path(&self, r: &ManifestRecord) -> PathBuf {
        self.resolve(&r.wav_path)
    }

    pub fn alignment(&self, r: &ManifestRecord) -> Result<Option<AlignmentTrack>> {
        match &r.alignment_path {
            None => Ok(None),
            Some(p) => AlignmentTrack::parse(&fsutil::read_string(&self.resolve(p))?).map(Some),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, spk: usize, gender: &str) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            wav_path: format!("{id}.wav").into(),
            speaker_id: spk,
            gender: gender.into(),
            alignment_path: None,
            split: Split::Train,
        }
    }

    #[test]
    fn validation() {
        assert!(Manifest::new(".".into(), vec![rec("a", 0, "M"), rec("b", 1, "F")]).is_ok());
        assert!(Manifest::new(".".into(), vec![rec("a", 0, "M"), rec("a", 1, "F")]).is_err());
        assert!(Manifest::new(".".into(), vec![rec("a", 0, "M"), rec("b", 2, "F")]).is_err());
        assert!(Manifest::new(".".into(), vec![rec("a", 0, "M"), rec("b", 0, "F")]).is_err());
        assert!(Manifest::new(".".into(), vec![]).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new(dir.path().into(), vec![rec("a", 0, "M"), rec("b", 1, "F")]).unwrap();
        let p = dir.path().join("m.jsonl");
        m.save(&p).unwrap();
        assert_eq!(Manifest::load(&p).unwrap(), m);
        std::fs::write(&p, "{\"id\":\"a\",\"wav_path\":\"a.wav\",\"speaker_id\":0,\"gender\":\"M\",\"split\":\"train\",\"x\":1}\n").unwrap();
        assert!(matches!(Manifest::load(&p), Err(Error::Data(_))));
    }
}
