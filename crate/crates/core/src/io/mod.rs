//! On-disk formats: tensors, vocabularies, dataset manifests and checkpoints.
//! Every write goes to a temporary file in the target directory and is
//! renamed into place, so readers never observe a partial file.

pub mod checkpoint;
pub mod manifest;
pub mod tensor_file;
pub mod vocab;

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, ModelKind};
pub use manifest::{load_manifest, read_durations, write_durations, write_manifest, LoadedEntry, Manifest, ManifestEntry};
pub use tensor_file::{read_tensor, write_tensor, DType};
pub use vocab::{load_vocab, Vocab};

use crate::error::{Error, Result};

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json { context: path.display().to_string(), source })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|source| Error::Json { context: path.display().to_string(), source })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}
