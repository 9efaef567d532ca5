//! Named parameter storage and the binary32 checkpoint format.
//!
//! A checkpoint is two files: `<stem>.json`, listing every parameter's name,
//! shape and element offset alongside caller metadata, and `<stem>.f32`, the
//! concatenated little-endian payload in manifest order.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{atomic_write, f32_from_le_bytes, f32_to_le_bytes, read_bytes};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered map of named parameter tensors. Iteration order is insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let (idx, _) = self.entries.insert_full(name, value);
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn expect_id(&self, name: &str) -> ParamId {
        self.id(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not registered"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).unwrap()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Parameters whose names start with `prefix`, with the prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Appends all of `other`'s parameters under `prefix`.
    pub fn absorb_prefixed(&mut self, prefix: &str, other: &ParamStore<T>) -> Result<()> {
        for (_, name, t) in other.iter() {
            self.insert(format!("{prefix}{name}"), t.clone())?;
        }
        Ok(())
    }

    /// Errors unless `other` has exactly the same names, order and shapes.
    pub fn check_same_layout<U: Scalar>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::malformed(
                "checkpoint",
                format!("expected {} parameters, found {}", self.len(), other.len()),
            ));
        }
        for ((a, ta), (b, tb)) in self.entries.iter().zip(other.entries.iter()) {
            if a != b {
                return Err(Error::malformed(
                    "checkpoint",
                    format!("expected parameter `{a}`, found `{b}`"),
                ));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::shape(format!("parameter `{a}`"), ta.shape(), tb.shape()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub precision: String,
    pub payload: String,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.f32`. Values are stored as binary32
/// regardless of `T`.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    stem: &str,
    store: &ParamStore<T>,
    meta: serde_json::Value,
) -> Result<()> {
    let payload_name = format!("{stem}.f32");
    let mut payload = Vec::with_capacity(store.num_elements());
    let mut params = Vec::with_capacity(store.len());
    for (_, name, t) in store.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        payload.extend(t.data().iter().map(|v| v.as_f64() as f32));
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        precision: f32::NAME.to_string(),
        payload: payload_name.clone(),
        params,
        meta,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::malformed("checkpoint", e))?;
    atomic_write(&dir.join(&payload_name), &f32_to_le_bytes(&payload))?;
    atomic_write(&dir.join(format!("{stem}.json")), &json)
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<(ParamStore<f32>, serde_json::Value)> {
    let manifest_path = dir.join(format!("{stem}.json"));
    let bytes = read_bytes(&manifest_path, "checkpoint manifest")?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::malformed("checkpoint manifest", e))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::malformed(
            "checkpoint manifest",
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    if manifest.precision != f32::NAME {
        return Err(Error::malformed(
            "checkpoint manifest",
            format!("unsupported precision `{}`", manifest.precision),
        ));
    }
    let payload = f32_from_le_bytes(&read_bytes(&dir.join(&manifest.payload), "checkpoint payload")?, "checkpoint payload")?;
    let mut store = ParamStore::new();
    let mut cursor = 0;
    for entry in &manifest.params {
        let len: usize = entry.shape.iter().product();
        if entry.offset != cursor || cursor + len > payload.len() {
            return Err(Error::shape(
                format!("checkpoint parameter `{}`", entry.name),
                &[cursor + len],
                &[payload.len()],
            ));
        }
        let t = Tensor::new(entry.shape.clone(), payload[cursor..cursor + len].to_vec())?;
        store.insert(entry.name.clone(), t)?;
        cursor += len;
    }
    if cursor != payload.len() {
        return Err(Error::shape("checkpoint payload", &[cursor], &[payload.len()]));
    }
    Ok((store, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]).unwrap())
            .unwrap();
        s.insert("a.bias", Tensor::new(vec![3], vec![0.25, 0.5, 0.75]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = sample();
        assert!(s.insert("a.bias", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        save_checkpoint(dir.path(), "model", &s, serde_json::json!({"k": 1})).unwrap();
        let (loaded, meta) = load_checkpoint(dir.path(), "model").unwrap();
        assert_eq!(loaded, s);
        assert_eq!(meta["k"], 1);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), "model", &sample(), serde_json::Value::Null).unwrap();
        let p = dir.path().join("model.f32");
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(dir.path(), "model"), Err(Error::Shape { .. })));
    }

    #[test]
    fn layout_check_detects_shape_change() {
        let a = sample();
        let mut b = sample();
        *b.by_name_mut("a.bias").unwrap() = Tensor::zeros(vec![4]);
        assert!(a.check_same_layout(&b).is_err());
        assert!(a.check_same_layout(&a.cast::<f64>()).is_ok());
    }
}
