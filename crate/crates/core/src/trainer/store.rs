//! Checkpoint directory: `manifest.json` plus one `ckpt_{epoch:04}.bin` per
//! snapshot.
//!
//! Snapshot layout, all integers little-endian:
//!
//! ```text
//! "CSLCKPT1"
//! per tensor: u32 name_len, name, u32 rank, u32 dims[rank], f32 data[prod(dims)]
//! u32 crc32 over every byte between the magic and the checksum
//! ```

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ClassWeights, TrainConfig};
use crate::model::{ModelConfig, ModelParams};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"CSLCKPT1";
pub const MANIFEST_FORMAT: &str = "csl-checkpoints/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("format error: {0}")]
    Format(String),
    #[error("snapshot for epoch {epoch} is corrupt: {reason}")]
    Corrupt { epoch: usize, reason: String },
    #[error("manifest lists epoch {epoch} but {} is missing", path.display())]
    MissingSnapshot { epoch: usize, path: PathBuf },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub epoch: usize,
    pub file: String,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub class_weights: ClassWeights,
    pub dataset_fingerprint: String,
    pub grammar_fingerprint: String,
    pub epochs: Vec<EpochEntry>,
}

impl Manifest {
    pub fn new(
        model: ModelConfig,
        train: TrainConfig,
        class_weights: ClassWeights,
        dataset_fingerprint: String,
        grammar_fingerprint: String,
    ) -> Self {
        Self {
            format: MANIFEST_FORMAT.to_string(),
            model,
            train,
            class_weights,
            dataset_fingerprint,
            grammar_fingerprint,
            epochs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub params: ModelParams,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointStore {
    pub manifest: Manifest,
    pub snapshots: Vec<Snapshot>,
}

impl CheckpointStore {
    pub fn epochs(&self) -> Vec<usize> {
        self.snapshots.iter().map(|s| s.epoch).collect()
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.manifest.model
    }

    /// Epochs strictly increasing, manifest and snapshots agreeing, every
    /// tensor shaped for the manifest's model.
    pub fn validate(&self) -> Result<()> {
        if self.manifest.epochs.len() != self.snapshots.len() {
            return Err(StoreError::Format(format!(
                "manifest lists {} epochs but store holds {} snapshots",
                self.manifest.epochs.len(),
                self.snapshots.len()
            )));
        }
        let mut prev = 0;
        for (entry, snap) in self.manifest.epochs.iter().zip(&self.snapshots) {
            if entry.epoch != snap.epoch || snap.epoch <= prev {
                return Err(StoreError::Format(format!(
                    "epoch order broken at epoch {}",
                    snap.epoch
                )));
            }
            prev = snap.epoch;
            snap.params
                .check_shapes(&self.manifest.model)
                .map_err(|e| StoreError::Corrupt {
                    epoch: snap.epoch,
                    reason: e.to_string(),
                })?;
        }
        Ok(())
    }
}

pub fn snapshot_file_name(epoch: usize) -> String {
    format!("ckpt_{epoch:04}.bin")
}

pub fn encode_snapshot(params: &ModelParams) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, t) in params.named_tensors() {
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            body.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.iter() {
            body.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&body);
    let mut out = Vec::with_capacity(body.len() + 12);
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parses a snapshot for a model shaped by `cfg`. `epoch` only labels errors.
pub fn decode_snapshot(bytes: &[u8], cfg: &ModelConfig, epoch: usize) -> Result<ModelParams> {
    let corrupt = |reason: String| StoreError::Corrupt { epoch, reason };
    if bytes.len() < SNAPSHOT_MAGIC.len() || &bytes[..8] != SNAPSHOT_MAGIC {
        return Err(StoreError::Format(format!(
            "epoch {epoch}: bad snapshot magic, expected {:?}",
            std::str::from_utf8(SNAPSHOT_MAGIC).unwrap()
        )));
    }
    if bytes.len() < 12 {
        return Err(corrupt(format!("file is only {} bytes", bytes.len())));
    }
    let (body, tail) = bytes[8..].split_at(bytes.len() - 12);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(corrupt(format!(
            "checksum mismatch (stored {stored:08x}, computed {actual:08x}); file truncated or damaged"
        )));
    }

    let mut params = ModelParams::zeros(cfg);
    let mut r = Reader { buf: body, pos: 0 };
    let short = || corrupt("record runs past end of file".into());
    for (name, mut t) in params.named_tensors_mut() {
        let len = r.u32().ok_or_else(short)? as usize;
        let got = r.take(len).ok_or_else(short)?;
        if got != name.as_bytes() {
            return Err(corrupt(format!(
                "expected tensor {name}, found {:?}",
                String::from_utf8_lossy(got)
            )));
        }
        let rank = r.u32().ok_or_else(short)? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(short)?;
        if dims != t.shape() {
            return Err(corrupt(format!(
                "tensor {name} has shape {dims:?}, manifest model needs {:?}",
                t.shape()
            )));
        }
        let data = r.take(t.len() * 4).ok_or_else(short)?;
        for (v, b) in t.iter_mut().zip(data.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap()) as f64;
        }
    }
    if r.pos != body.len() {
        return Err(corrupt(format!("{} trailing bytes after last tensor", body.len() - r.pos)));
    }
    Ok(params)
}

fn write_durably(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn manifest_bytes(m: &Manifest) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(m).expect("manifest serialises");
    s.push(b'\n');
    s
}

/// Writes snapshots one at a time, rewriting the manifest after each so the
/// directory is always loadable.
pub struct StoreWriter {
    dir: PathBuf,
    manifest: Manifest,
}

impl StoreWriter {
    pub fn create(dir: &Path, mut manifest: Manifest) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        manifest.epochs.clear();
        let w = Self {
            dir: dir.to_path_buf(),
            manifest,
        };
        write_durably(&w.dir.join(MANIFEST_FILE), &manifest_bytes(&w.manifest))?;
        Ok(w)
    }

    pub fn append(&mut self, snap: &Snapshot) -> Result<()> {
        if let Some(last) = self.manifest.epochs.last() {
            if snap.epoch <= last.epoch {
                return Err(StoreError::Format(format!(
                    "epoch {} appended after epoch {}",
                    snap.epoch, last.epoch
                )));
            }
        }
        let file = snapshot_file_name(snap.epoch);
        write_durably(&self.dir.join(&file), &encode_snapshot(&snap.params))?;
        self.manifest.epochs.push(EpochEntry {
            epoch: snap.epoch,
            file,
            train_loss: snap.train_loss,
        });
        write_durably(&self.dir.join(MANIFEST_FILE), &manifest_bytes(&self.manifest))
    }
}

pub fn save_store(store: &CheckpointStore, dir: &Path) -> Result<()> {
    store.validate()?;
    let mut w = StoreWriter::create(dir, store.manifest.clone())?;
    for s in &store.snapshots {
        w.append(s)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| StoreError::Format(format!("{}: {e}", path.display())))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(StoreError::Format(format!(
            "unsupported manifest format {:?}, expected {MANIFEST_FORMAT:?}",
            manifest.format
        )));
    }
    Ok(manifest)
}

pub fn load_store(dir: &Path) -> Result<CheckpointStore> {
    let manifest = read_manifest(dir)?;
    let mut snapshots = Vec::with_capacity(manifest.epochs.len());
    for entry in &manifest.epochs {
        let path = dir.join(&entry.file);
        if !path.exists() {
            return Err(StoreError::MissingSnapshot {
                epoch: entry.epoch,
                path,
            });
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        snapshots.push(Snapshot {
            epoch: entry.epoch,
            params: decode_snapshot(&bytes, &manifest.model, entry.epoch)?,
            train_loss: entry.train_loss,
        });
    }
    let store = CheckpointStore { manifest, snapshots };
    store.validate()?;
    Ok(store)
}
