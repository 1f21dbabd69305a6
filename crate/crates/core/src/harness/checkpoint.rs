//! Checkpoints: a JSON manifest and one blob of little-endian `f32` values.
//!
//! The manifest records the format version, training stage and step, a
//! snapshot of the run configuration, and a tensor directory mapping each
//! name to its shape, byte offset and byte length. Tensors are stored in
//! directory order and tile the blob exactly.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: u8,
    pub step: u64,
    pub config: RunConfig,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub step: u64,
    pub config: RunConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(stage: u8, step: u64, config: RunConfig) -> Self {
        Self {
            stage,
            step,
            config,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Like [`Checkpoint::get`], failing with a state error naming the tensor.
    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::State(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    /// Manifest and blob bytes, without touching the filesystem.
    pub fn encode(&self) -> (Manifest, Vec<u8>) {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let bytes = t.to_le_f32_bytes();
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
                byte_length: bytes.len() as u64,
            });
            blob.extend_from_slice(&bytes);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            stage: self.stage,
            step: self.step,
            config: self.config.clone(),
            blob: BLOB_FILE.to_string(),
            tensors: entries,
        };
        (manifest, blob)
    }

    /// Writes `manifest.json` and `tensors.bin` into `dir`, returning the
    /// manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (manifest, blob) = self.encode();
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let mpath = dir.join(MANIFEST_FILE);
        let bpath = dir.join(BLOB_FILE);
        fs::write(&bpath, &blob).map_err(|e| Error::io(&bpath, e))?;
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        Ok(mpath)
    }

    /// Loads from a checkpoint directory or its manifest file.
    pub fn load(path: &Path) -> Result<Self> {
        let mpath = manifest_path(path);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&mpath, format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(
                &mpath,
                format!(
                    "format_version {} unsupported (expected {FORMAT_VERSION})",
                    manifest.format_version
                ),
            ));
        }
        manifest
            .config
            .validate()
            .map_err(|e| Error::format(&mpath, format!("config snapshot: {e}")))?;
        let bpath = mpath.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        decode(&mpath, manifest, &blob)
    }

    /// SHA-256 of the manifest and blob bytes as written by [`Checkpoint::save`].
    pub fn digest(&self) -> String {
        let (manifest, blob) = self.encode();
        let mut h = Sha256::new();
        h.update(serde_json::to_string_pretty(&manifest).expect("manifest serializes"));
        h.update(b"\n");
        h.update(&blob);
        hex::encode(h.finalize())
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn decode(mpath: &Path, manifest: Manifest, blob: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: String| Error::format(mpath, msg);
    let mut seen = BTreeSet::new();
    let mut cursor = 0u64;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if !seen.insert(e.name.as_str()) {
            return Err(bad(format!("tensor `{}` listed twice", e.name)));
        }
        if e.offset != cursor {
            return Err(bad(format!(
                "tensor `{}` starts at byte {} but the previous tensor ends at {cursor}",
                e.name, e.offset
            )));
        }
        let numel: usize = e.shape.iter().product();
        if e.byte_length != 4 * numel as u64 {
            return Err(bad(format!(
                "tensor `{}` of shape {:?} needs {} bytes, manifest says {}",
                e.name,
                e.shape,
                4 * numel,
                e.byte_length
            )));
        }
        let end = cursor + e.byte_length;
        if end > blob.len() as u64 {
            return Err(bad(format!(
                "tensor `{}` ends at byte {end} beyond the {}-byte blob",
                e.name,
                blob.len()
            )));
        }
        let data: Vec<f32> = blob[cursor as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| bad(format!("tensor `{}`: {err}", e.name)))?;
        tensors.push((e.name.clone(), t));
        cursor = end;
    }
    if cursor != blob.len() as u64 {
        return Err(bad(format!(
            "blob has {} bytes but the tensor directory covers {cursor}",
            blob.len()
        )));
    }
    Ok(Checkpoint {
        stage: manifest.stage,
        step: manifest.step,
        config: manifest.config,
        tensors,
    })
}
