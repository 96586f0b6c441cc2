//! Named-tensor files: one JSON manifest line, then little-endian `f32` blobs
//! in manifest order.
//!
//! ```text
//! {"format":"chameleon-tensors","version":1,"metadata":{..},"tensors":[{"name":..,"shape":[..],"offset":0,"length":..},..]}\n
//! <blob 0><blob 1>...
//! ```
//! Offsets and lengths are in bytes, relative to the first byte after the
//! newline.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerBackbone};
use crate::numerics::{ParamStore, Tensor};

pub const FORMAT: &str = "chameleon-tensors";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub metadata: Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(tensors: &[(&str, &Tensor)], metadata: Value) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = blob.len();
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            length: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        metadata,
        tensors: entries,
    };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..nl])?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let blob = &bytes[nl + 1..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.length != 4 * n || e.offset + e.length > blob.len() {
            return Err(Error::Checkpoint(format!("tensor '{}' has a bad extent", e.name)));
        }
        let data = blob[e.offset..e.offset + e.length]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, data)?));
    }
    Ok((manifest, tensors))
}

pub fn save(path: &Path, tensors: &[(&str, &Tensor)], metadata: Value) -> Result<()> {
    let bytes = encode(tensors, metadata)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn store_entries(store: &ParamStore, trainable_only: bool) -> Vec<(&str, &Tensor)> {
    store
        .iter()
        .filter(|(_, _, t)| !trainable_only || t.requires_grad())
        .map(|(_, n, t)| (n, t))
        .collect()
}

pub fn save_backbone(path: &Path, backbone: &TransformerBackbone) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "backbone",
        "config": backbone.config(),
        "frozen": backbone.is_frozen(),
    });
    save(path, &store_entries(backbone.store(), false), meta)
}

pub fn load_backbone(path: &Path) -> Result<TransformerBackbone> {
    let (manifest, tensors) = load(path)?;
    let config: ModelConfig = serde_json::from_value(
        manifest
            .metadata
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("backbone manifest lacks a config".into()))?,
    )?;
    let mut bb = TransformerBackbone::from_tensors(config, tensors)?;
    if manifest.metadata.get("frozen").and_then(Value::as_bool) == Some(true) {
        bb.freeze();
    }
    Ok(bb)
}

/// Writes only the trainable tensors of `store`.
pub fn save_adapters(path: &Path, store: &ParamStore, metadata: Value) -> Result<()> {
    save(path, &store_entries(store, true), metadata)
}

/// Copies tensors from an adapter file into a store with matching names.
pub fn load_adapters_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let (_, tensors) = load(path)?;
    for (name, t) in tensors {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown adapter tensor '{name}'")))?;
        let slot = store.get_mut(id);
        if slot.shape() != t.shape() {
            return Err(Error::Checkpoint(format!("shape mismatch for '{name}'")));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

/// Token ids and example embeddings, keyed by the corpus checksum.
pub fn save_corpus_cache(path: &Path, corpus: &Corpus, embeddings: &[Vec<f64>]) -> Result<()> {
    let n = corpus.len();
    let width = corpus.examples.iter().map(|e| e.ids.len()).max().unwrap_or(1).max(1);
    let mut ids = vec![0.0; n * width];
    let mut lens = vec![0.0; n];
    for (i, e) in corpus.examples.iter().enumerate() {
        lens[i] = e.ids.len() as f64;
        for (j, &id) in e.ids.iter().enumerate() {
            ids[i * width + j] = id as f64;
        }
    }
    let d = embeddings.first().map_or(1, Vec::len);
    let ids = Tensor::from_vec(&[n, width], ids)?;
    let lens = Tensor::from_vec(&[n], lens)?;
    let emb = Tensor::from_vec(&[n, d], embeddings.concat())?;
    let meta = serde_json::json!({ "kind": "corpus_cache", "corpus_checksum": corpus.checksum() });
    save(path, &[("ids", &ids), ("lengths", &lens), ("embeddings", &emb)], meta)
}

/// Returns cached embeddings if the file was written for this corpus.
pub fn load_corpus_cache(path: &Path, corpus: &Corpus) -> Result<Option<Vec<Vec<f64>>>> {
    let (manifest, tensors) = load(path)?;
    if manifest.metadata.get("corpus_checksum").and_then(Value::as_str) != Some(&corpus.checksum()) {
        return Ok(None);
    }
    let emb = tensors
        .iter()
        .find(|(n, _)| n == "embeddings")
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Checkpoint("cache lacks embeddings".into()))?;
    Ok(Some((0..emb.rows()).map(|r| emb.row(r).to_vec()).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn file_bytes_round_trip(values in prop::collection::vec(-1e6f32..1e6, 1..40), split in 1usize..5) {
            let n = values.len();
            let data: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            let a = Tensor::from_vec(&[n], data.clone()).unwrap();
            let cut = (n / split).max(1);
            let b = Tensor::from_vec(&[cut], data[..cut].to_vec()).unwrap();
            let bytes = encode(&[("a", &a), ("b.x", &b)], serde_json::json!({"k": 1})).unwrap();
            let (m, ts) = decode(&bytes).unwrap();
            prop_assert_eq!(&ts[0].1, &a);
            prop_assert_eq!(&ts[1].1, &b);
            prop_assert_eq!(m.tensors[1].offset, 4 * n);
            let again = encode(&[("a", &ts[0].1), ("b.x", &ts[1].1)], m.metadata.clone()).unwrap();
            prop_assert_eq!(bytes, again);
        }
    }

    #[test]
    fn manifest_layout() {
        let t = Tensor::from_vec(&[2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&[("w", &t)], Value::Null).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let head: Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(head["tensors"][0]["shape"], serde_json::json!([2]));
        assert_eq!(&bytes[nl + 1..nl + 5], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[nl + 5..], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let t = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&[("w", &t)], Value::Null).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"no newline").is_err());
    }
}
