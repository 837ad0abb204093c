//! Checkpoints: a JSON manifest plus a little-endian f32 blob in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, PolicyModel};
use super::store::ParameterStore;
use crate::error::{Error, Result};
use crate::provenance::{read_json, sha256_hex, write_atomic, write_json_atomic, Provenance};

pub const CHECKPOINT_FORMAT: &str = "dtlight-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub trainable: bool,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub blob: String,
    pub blob_sha256: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: PolicyModel<f32>,
    pub meta: serde_json::Value,
    pub provenance: Option<Provenance>,
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

impl Checkpoint {
    pub fn new(model: PolicyModel<f32>) -> Self {
        Self {
            model,
            meta: serde_json::Value::Null,
            provenance: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let store = &self.model.store;
        let mut blob = Vec::with_capacity(store.count_params(false) * 4);
        let mut tensors = Vec::with_capacity(store.len());
        let mut offset = 0;
        for t in store.tensors() {
            tensors.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: "f32".into(),
                trainable: t.trainable,
                offset,
            });
            offset += t.numel();
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let bin = blob_path(path);
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.model.config.clone(),
            tensors,
            blob: bin
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            blob_sha256: sha256_hex(&blob),
            meta: self.meta.clone(),
            provenance: self.provenance.clone(),
        };
        write_atomic(&bin, &blob)?;
        write_json_atomic(path, &manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(path)?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "{}: unsupported checkpoint format {} v{}",
                path.display(),
                manifest.format,
                manifest.version
            )));
        }
        let bin = path.with_file_name(&manifest.blob);
        let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if sha256_hex(&blob) != manifest.blob_sha256 {
            return Err(Error::Incompatible(format!(
                "{}: blob checksum mismatch",
                bin.display()
            )));
        }
        let mut store = ParameterStore::<f32>::new();
        let mut expected_offset = 0;
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(Error::Incompatible(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset || (e.offset + n) * 4 > blob.len() {
                return Err(Error::Incompatible(format!("tensor `{}` lies outside the blob", e.name)));
            }
            let data = blob[e.offset * 4..(e.offset + n) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let id = store.add(&e.name, &e.shape, data)?;
            store.tensor_mut(id).trainable = e.trainable;
            expected_offset += n;
        }
        if expected_offset * 4 != blob.len() {
            return Err(Error::Incompatible("blob has trailing bytes".into()));
        }
        Ok(Self {
            model: PolicyModel::from_store(manifest.model, store)?,
            meta: manifest.meta,
            provenance: manifest.provenance,
        })
    }
}
