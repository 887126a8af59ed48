//! Binary checkpoint archive.
//!
//! Layout: the magic bytes `GSGN`, a `u32` little-endian format version, a
//! `u64` little-endian header length, the UTF-8 JSON header, then every tensor
//! as raw little-endian `f32` values in directory order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{Classifier, Critic, CriticConfig, Gsgn, ModelConfig, NormMode};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GSGN";
pub const FORMAT_VERSION: u32 = 1;

pub const GENERATOR: &str = "generator.";
pub const GENERATOR_TS: &str = "generator_ts.";
pub const CRITIC_S: &str = "critic_s.";
pub const CRITIC_T: &str = "critic_t.";
pub const CLASSIFIER: &str = "classifier.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tasks: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    critic_config: Option<CriticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iteration: Option<u64>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Model configuration, task names and named tensors, plus optional training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tasks: Vec<String>,
    pub critic_config: Option<CriticConfig>,
    /// Completed training iterations when the checkpoint carries training state.
    pub iteration: Option<u64>,
    /// Free-form description of how the checkpoint was produced.
    pub metadata: serde_json::Value,
    pub tensors: ParamStore,
}

fn validate_tasks(tasks: &[String]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Checkpoint("at least one task name is required".into()));
    }
    for (i, t) in tasks.iter().enumerate() {
        if t.trim().is_empty() {
            return Err(Error::Checkpoint(format!("task {i} has an empty name")));
        }
        if tasks[..i].contains(t) {
            return Err(Error::Checkpoint(format!("duplicate task name {t}")));
        }
    }
    Ok(())
}

impl Checkpoint {
    /// Checkpoint holding one generator under the `generator.` prefix.
    pub fn from_generator(config: &ModelConfig, tasks: Vec<String>, params: &ParamStore) -> Result<Self> {
        let mut ck = Self {
            config: config.clone(),
            tasks,
            critic_config: None,
            iteration: None,
            metadata: serde_json::Value::Null,
            tensors: ParamStore::new(),
        };
        ck.insert_store(GENERATOR, params)?;
        Ok(ck)
    }

    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for (name, t) in store.iter() {
            self.tensors.insert(format!("{prefix}{name}"), t.clone())?;
        }
        Ok(())
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn sub_store(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in self.tensors.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, t.clone()).expect("names are unique");
            }
        }
        out
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n.starts_with(prefix))
    }

    /// The primary generator and its parameters.
    pub fn generator(&self) -> Result<(Gsgn, ParamStore)> {
        self.generator_at(GENERATOR)
    }

    pub fn generator_at(&self, prefix: &str) -> Result<(Gsgn, ParamStore)> {
        let cfg = if prefix == GENERATOR_TS { reverse_config(&self.config) } else { self.config.clone() };
        Gsgn::with_params(&cfg, &self.sub_store(prefix))
    }

    pub fn critic_at(&self, prefix: &str) -> Result<(Critic, ParamStore)> {
        let cfg = self.critic_config.as_ref().ok_or_else(|| Error::Checkpoint("no critic configuration".into()))?;
        Critic::with_params(cfg, &self.sub_store(prefix))
    }

    pub fn classifier(&self) -> Result<(Classifier, ParamStore)> {
        let cfg = self.critic_config.as_ref().ok_or_else(|| Error::Checkpoint("no critic configuration".into()))?;
        Classifier::with_params(cfg, self.tasks.len(), &self.sub_store(CLASSIFIER))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        validate_tasks(&self.tasks)?;
        self.config.validate()?;
        if self.config.is_adaptive() && self.config.task_count != self.tasks.len() {
            return Err(Error::Checkpoint(format!(
                "{} task names for a model conditioned on {} tasks",
                self.tasks.len(),
                self.config.task_count
            )));
        }
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in self.tensors.iter() {
            entries.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset });
            offset += 4 * t.len() as u64;
        }
        let header = Header {
            config: self.config.clone(),
            tasks: self.tasks.clone(),
            critic_config: self.critic_config.clone(),
            iteration: self.iteration,
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.tensors.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a GSGN checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])?;
        let payload = &bytes[payload_start..];
        let mut tensors = ParamStore::new();
        let mut expected = 0u64;
        for e in &header.tensors {
            if e.offset != expected {
                return Err(Error::Checkpoint(format!("tensor {} is not at its directory offset", e.name)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            let raw = payload.get(start..end).ok_or_else(|| bad("truncated tensor payload"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
            expected = end as u64;
        }
        if expected as usize != payload.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        validate_tasks(&header.tasks)?;
        header.config.validate()?;
        Ok(Self {
            config: header.config,
            tasks: header.tasks,
            critic_config: header.critic_config,
            iteration: header.iteration,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }

    /// First 8 bytes of the SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<u64> {
        Ok(hash_bytes(&self.to_bytes()?))
    }

    /// Index of a task by name.
    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t == name)
    }
}

pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Configuration of the reverse (target to source) generator, which is never task conditioned.
pub fn reverse_config(config: &ModelConfig) -> ModelConfig {
    let norm_mode = match config.norm_mode {
        NormMode::Adaptive => NormMode::Instance,
        other => other,
    };
    ModelConfig { norm_mode, ..config.clone() }
}
