//! JSON-lines dataset manifests. Relative paths resolve against the
//! manifest's own directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_file, read_json, read_tensor, write_atomic, write_json};
use crate::error::{Error, Result};
use crate::length_regulator::DurationSequence;
use crate::model::{MelSpectrogram, PhonemeSequence};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub phoneme_ids: Vec<usize>,
    pub mel_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub base: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// A manifest entry with its files read and cross-checked.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedEntry {
    pub id: String,
    pub phonemes: PhonemeSequence,
    pub mel: MelSpectrogram,
    pub durations: Option<DurationSequence>,
}

impl Manifest {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        Manifest { base: base.into(), entries: Vec::new() }
    }

    pub fn parse(text: &str, base: impl Into<PathBuf>) -> Result<Self> {
        let mut m = Manifest::new(base);
        let mut ids = HashSet::new();
        let mut offset = 0;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            let start = offset;
            offset += line.len();
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|err| Error::format(start, format!("manifest line {}: {err}", i + 1)))?;
            if !ids.insert(e.id.clone()) {
                return Err(Error::format(start, format!("manifest line {}: duplicate id {:?}", i + 1, e.id)));
            }
            if e.phoneme_ids.is_empty() {
                return Err(Error::format(start, format!("manifest line {}: phoneme_ids is empty", i + 1)));
            }
            m.entries.push(e);
        }
        Ok(m)
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("manifest entries serialize") + "\n")
            .collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    pub fn has_durations(&self) -> bool {
        self.entries.iter().all(|e| e.duration_path.is_some())
    }

    /// Reads every referenced file, enforcing `Σ durations == mel frames`.
    pub fn load_entries(&self) -> Result<Vec<LoadedEntry>> {
        self.entries.iter().map(|e| self.load_entry(e)).collect()
    }

    pub fn load_entry(&self, e: &ManifestEntry) -> Result<LoadedEntry> {
        let phonemes = PhonemeSequence::new(e.phoneme_ids.clone())?;
        let mel = MelSpectrogram::new(read_tensor(&self.resolve(&e.mel_path))?)?;
        let durations = match &e.duration_path {
            Some(p) => {
                let d = read_durations(&self.resolve(p))?;
                if d.len() != phonemes.len() {
                    return Err(Error::Integrity(format!(
                        "{}: {} durations for {} phonemes",
                        e.id,
                        d.len(),
                        phonemes.len()
                    )));
                }
                if d.total() != mel.len() {
                    return Err(Error::Integrity(format!(
                        "{}: durations sum to {} but the mel has {} frames",
                        e.id,
                        d.total(),
                        mel.len()
                    )));
                }
                Some(d)
            }
            None => None,
        };
        if let Some(dir) = &e.attention_dir {
            let dir = self.resolve(dir);
            if !dir.is_dir() {
                return Err(Error::Integrity(format!("{}: attention_dir {} does not exist", e.id, dir.display())));
            }
        }
        Ok(LoadedEntry { id: e.id.clone(), phonemes, mel, durations })
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::format(e.valid_up_to(), "manifest is not UTF-8"))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::parse(text, base)
}

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    write_atomic(path, m.to_jsonl().as_bytes())
}

/// Duration files are a JSON array of non-negative integers.
pub fn read_durations(path: &Path) -> Result<DurationSequence> {
    read_json(path)
}

pub fn write_durations(path: &Path, d: &DurationSequence) -> Result<()> {
    write_json(path, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{write_tensor, DType};
    use crate::tensor::Tensor;

    fn fixture(dir: &Path, frames: usize, durations: &[usize]) -> Manifest {
        write_tensor(&dir.join("a.fstn"), &Tensor::zeros(&[frames, 2]), DType::F64).unwrap();
        write_durations(&dir.join("a.json"), &DurationSequence::new(durations.to_vec())).unwrap();
        let line = r#"{"id":"a","phoneme_ids":[1,2],"mel_path":"a.fstn","duration_path":"a.json"}"#;
        Manifest::parse(line, dir).unwrap()
    }

    #[test]
    fn loads_consistent_entry() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 5, &[2, 3]);
        let e = &m.load_entries().unwrap()[0];
        assert_eq!(e.mel.len(), 5);
        assert_eq!(e.durations.as_ref().unwrap().values(), &[2, 3]);
    }

    #[test]
    fn duration_sum_mismatch_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 6, &[2, 3]);
        assert!(matches!(m.load_entries(), Err(Error::Integrity(_))));
    }

    #[test]
    fn roundtrip_and_optional_fields() {
        let text = "{\"id\":\"x\",\"phoneme_ids\":[3],\"mel_path\":\"m/x.fstn\"}\n\n";
        let m = Manifest::parse(text, "/data").unwrap();
        assert_eq!(m.entries[0].duration_path, None);
        assert!(!m.has_durations());
        assert_eq!(m.resolve(&m.entries[0].mel_path), PathBuf::from("/data/m/x.fstn"));
        assert_eq!(Manifest::parse(&m.to_jsonl(), "/data").unwrap(), m);
    }

    #[test]
    fn malformed_lines_name_their_offset() {
        let good = "{\"id\":\"x\",\"phoneme_ids\":[3],\"mel_path\":\"x\"}\n";
        let err = Manifest::parse(&format!("{good}{{\"id\":\"y\",\"bogus\":1}}\n"), ".").unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == good.len()));
        assert!(err.to_string().contains("line 2"));
        let err = Manifest::parse(&format!("{good}{good}"), ".").unwrap_err();
        assert!(err.to_string().contains("duplicate id"));
    }

    #[test]
    fn missing_mel_is_io_error() {
        let m = Manifest::parse("{\"id\":\"x\",\"phoneme_ids\":[3],\"mel_path\":\"nope.fstn\"}", "/nonexistent").unwrap();
        assert!(matches!(m.load_entries(), Err(Error::Io { .. })));
    }
}
