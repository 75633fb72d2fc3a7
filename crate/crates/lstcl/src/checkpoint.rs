//! Checkpoints: a TOML manifest next to a raw little-endian `f32` payload.
//!
//! `<stem>.toml` lists every tensor with its group, name, offset and shape;
//! `<stem>.bin` holds the values back to back. The manifest records the
//! payload's SHA-256 and is written last, so a manifest always describes a
//! complete payload.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lstcl_core::optim::AdamState;
use lstcl_core::params::ParamStore;
use lstcl_core::tensor::Tensor;
use lstcl_core::trainer::TrainState;

use crate::error::{CliError, IoContext, Result};
use crate::fsutil::write_atomic;

pub const ONLINE: &str = "online";
pub const MOMENTUM: &str = "momentum";
pub const ADAM_M: &str = "adam.m";
pub const ADAM_V: &str = "adam.v";
/// Backbone and classifier head of a probed or finetuned model.
pub const CLASSIFIER: &str = "classifier";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    /// In `f32` elements from the start of the payload.
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: String,
    pub config_hash: String,
    pub model_hash: String,
    pub step: u64,
    pub adam_step: u64,
    pub payload_sha256: String,
    #[serde(default)]
    pub tensor: Vec<TensorEntry>,
}

/// Named groups of tensors plus the bookkeeping around them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config_hash: String,
    pub model_hash: String,
    pub step: u64,
    pub adam_step: u64,
    pub groups: Vec<(String, ParamStore<f32>)>,
}

pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("toml"), stem.with_extension("bin"))
}

impl Checkpoint {
    pub fn from_train_state(config_hash: String, model_hash: String, state: &TrainState<f32>) -> Self {
        let mut groups = vec![(ONLINE.to_string(), state.online.clone())];
        if let Some(m) = &state.momentum {
            groups.push((MOMENTUM.into(), m.clone()));
        }
        groups.push((ADAM_M.into(), state.adam.m.clone()));
        groups.push((ADAM_V.into(), state.adam.v.clone()));
        Self { kind: "pretrain".into(), config_hash, model_hash, step: state.step, adam_step: state.adam.step, groups }
    }

    pub fn group(&self, name: &str) -> Option<&ParamStore<f32>> {
        self.groups.iter().find(|(g, _)| g == name).map(|(_, s)| s)
    }

    fn take(&mut self, name: &str) -> Option<ParamStore<f32>> {
        let i = self.groups.iter().position(|(g, _)| g == name)?;
        Some(self.groups.remove(i).1)
    }

    pub fn into_train_state(mut self) -> Result<TrainState<f32>> {
        let missing = |g: &str| CliError::usage(format!("checkpoint has no `{g}` tensors"));
        let online = self.take(ONLINE).ok_or_else(|| missing(ONLINE))?;
        let momentum = self.take(MOMENTUM);
        let m = self.take(ADAM_M).ok_or_else(|| missing(ADAM_M))?;
        let v = self.take(ADAM_V).ok_or_else(|| missing(ADAM_V))?;
        Ok(TrainState { online, momentum, adam: AdamState { m, v, step: self.adam_step }, step: self.step })
    }

    fn payload(&self) -> (Vec<u8>, Vec<TensorEntry>) {
        let mut bytes = Vec::new();
        let mut entries = Vec::new();
        let mut offset = 0;
        for (group, store) in &self.groups {
            for (name, t) in store.iter() {
                entries.push(TensorEntry {
                    group: group.clone(),
                    name: name.clone(),
                    offset,
                    rows: t.rows(),
                    cols: t.cols(),
                    dtype: "f32".into(),
                });
                for x in t.data() {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
                offset += t.len();
            }
        }
        (bytes, entries)
    }

    /// SHA-256 of the payload; equal states give equal hashes.
    pub fn payload_hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.payload().0))
    }

    /// Writes `<stem>.bin` then `<stem>.toml`, each atomically.
    pub fn save(&self, stem: &Path) -> Result<Manifest> {
        let (toml_path, bin_path) = paths(stem);
        let (bytes, tensor) = self.payload();
        let manifest = Manifest {
            kind: self.kind.clone(),
            config_hash: self.config_hash.clone(),
            model_hash: self.model_hash.clone(),
            step: self.step,
            adam_step: self.adam_step,
            payload_sha256: format!("{:x}", Sha256::digest(&bytes)),
            tensor,
        };
        write_atomic(&bin_path, &bytes)?;
        write_atomic(&toml_path, toml::to_string(&manifest).expect("manifest serializes").as_bytes())?;
        Ok(manifest)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (toml_path, bin_path) = paths(stem);
        let text = std::fs::read_to_string(&toml_path).at(&toml_path)?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", toml_path.display())))?;
        let bytes = std::fs::read(&bin_path).at(&bin_path)?;
        let bad = |msg: String| CliError::usage(format!("{}: {msg}", bin_path.display()));
        if format!("{:x}", Sha256::digest(&bytes)) != manifest.payload_sha256 {
            return Err(bad("payload does not match the manifest hash".into()));
        }
        let mut groups: Vec<(String, ParamStore<f32>)> = Vec::new();
        let mut expected = 0;
        for e in &manifest.tensor {
            if e.dtype != "f32" {
                return Err(bad(format!("unsupported dtype `{}` for {}", e.dtype, e.name)));
            }
            let len = e.rows * e.cols;
            if e.offset != expected || 4 * (e.offset + len) > bytes.len() {
                return Err(bad(format!("tensor {} lies outside the payload", e.name)));
            }
            expected += len;
            let data = bytes[4 * e.offset..4 * (e.offset + len)]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(e.rows, e.cols, data)?;
            match groups.iter_mut().find(|(g, _)| *g == e.group) {
                Some((_, s)) => s.insert(e.name.clone(), t),
                None => {
                    let mut s = ParamStore::new();
                    s.insert(e.name.clone(), t);
                    groups.push((e.group.clone(), s));
                }
            }
        }
        if 4 * expected != bytes.len() {
            return Err(bad("payload has trailing bytes".into()));
        }
        Ok(Self {
            kind: manifest.kind,
            config_hash: manifest.config_hash,
            model_hash: manifest.model_hash,
            step: manifest.step,
            adam_step: manifest.adam_step,
            groups,
        })
    }
}
