//! Checkpoint files: safetensors with named sections and string metadata.
//!
//! Tensor names carry their section as a dotted prefix (`encoder.`,
//! `generator.`, `disc.query.`, `optim.encoder.` …). The header metadata holds
//! the format tag and version, the step counter, the seed and a JSON snapshot
//! of the run configuration.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const FORMAT_TAG: &str = "wplus-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    /// JSON snapshot of the configuration that produced the checkpoint.
    pub config: String,
    /// Free-form extra metadata.
    pub meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(step: u64, seed: u64, config: String) -> Self {
        Self {
            step,
            seed,
            config,
            meta: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn insert_section(&mut self, section: &str, tensors: BTreeMap<String, Tensor>) {
        for (k, t) in tensors {
            self.tensors.insert(format!("{section}.{k}"), t);
        }
    }

    pub fn insert_store(&mut self, section: &str, store: &ParamStore) -> Result<()> {
        self.insert_section(section, store.snapshot()?);
        Ok(())
    }

    pub fn has_section(&self, section: &str) -> bool {
        let p = format!("{section}.");
        self.tensors.keys().any(|k| k.starts_with(&p))
    }

    /// Entries of `section` with the prefix stripped. Nested sections are
    /// included, so `optim` also returns `encoder.m.*` entries.
    pub fn section(&self, section: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{section}.");
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(&p).map(|n| (n.to_string(), t.clone())))
            .collect()
    }

    pub fn load_store(&self, section: &str, store: &ParamStore) -> Result<()> {
        if !self.has_section(section) && !store.is_empty() {
            return Err(Error::Checkpoint(format!("checkpoint has no `{section}` section")));
        }
        store.load(&self.section(section))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut info = HashMap::new();
        info.insert("format".to_string(), FORMAT_TAG.to_string());
        info.insert("format_version".to_string(), FORMAT_VERSION.to_string());
        info.insert("step".to_string(), self.step.to_string());
        info.insert("seed".to_string(), self.seed.to_string());
        info.insert("config".to_string(), self.config.clone());
        for (k, v) in &self.meta {
            info.insert(format!("meta.{k}"), v.clone());
        }
        let tensors: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.contiguous()?)))
            .collect::<Result<_>>()?;
        safetensors::serialize(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(info))
            .map_err(|e| Error::Checkpoint(format!("serialization failed: {e}")))
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let unreadable = |why: String| {
            Error::Checkpoint(format!(
                "not a version {FORMAT_VERSION} checkpoint (format version unreadable): {why}"
            ))
        };
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| unreadable(e.to_string()))?;
        let info = header
            .metadata()
            .clone()
            .ok_or_else(|| unreadable("no metadata".into()))?;
        if info.get("format").map(String::as_str) != Some(FORMAT_TAG) {
            return Err(unreadable("missing format tag".into()));
        }
        let version = info.get("format_version").cloned().unwrap_or_default();
        if version != FORMAT_VERSION.to_string() {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version `{version}`, expected {FORMAT_VERSION}"
            )));
        }
        let num = |key: &str| -> Result<u64> {
            info.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata `{key}` missing or invalid")))
        };
        let tensors = candle_core::safetensors::load_buffer(bytes, device)
            .map_err(|e| Error::Checkpoint(format!("corrupt tensor data: {e}")))?;
        Ok(Self {
            step: num("step")?,
            seed: num("seed")?,
            config: info.get("config").cloned().unwrap_or_default(),
            meta: info
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
                .collect(),
            tensors: tensors.into_iter().collect(),
        })
    }

    /// Writes to a sibling temporary file first, then renames into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, device)
    }
}
