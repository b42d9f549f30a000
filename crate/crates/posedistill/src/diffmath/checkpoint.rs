//! Checkpoint format: a directory holding `manifest.json` (topology,
//! offsets, integrity data, plus a caller-supplied `extra` section) and
//! `params.blob` (little-endian f64 for each parameter's value, first
//! moment and second moment, in manifest order).
//!
//! Saving the same store twice produces byte-identical files: parameters
//! are serialized in sorted-name order and JSON maps are sorted.

use super::store::{ParamEntry, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "posedistill-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.blob";

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    len: u64,
    t: u64,
    frozen: bool,
    trainable: bool,
    value_offset: u64,
    m_offset: u64,
    v_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    extra: serde_json::Value,
    params: Vec<ParamRecord>,
    blob_len: u64,
    blob_crc32: u32,
}

fn push_f64s(blob: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        blob.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f64s(blob: &[u8], offset: u64, count: u64, what: &str) -> Result<Vec<f64>> {
    let start = offset as usize;
    let end = start + (count as usize) * 8;
    if end > blob.len() {
        return Err(Error::Format(format!(
            "checkpoint blob truncated reading {what} ({end} > {})",
            blob.len()
        )));
    }
    Ok(blob[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Write a checkpoint directory (created if missing). `extra` carries
/// caller state such as trainer progress or model topology.
pub fn save_store(dir: &Path, store: &ParamStore, extra: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut params = Vec::new();
    for (name, entry) in store.iter() {
        let value_offset = blob.len() as u64;
        push_f64s(&mut blob, entry.value.data());
        let m_offset = blob.len() as u64;
        push_f64s(&mut blob, &entry.m);
        let v_offset = blob.len() as u64;
        push_f64s(&mut blob, &entry.v);
        params.push(ParamRecord {
            name: name.to_string(),
            shape: entry.value.shape().to_vec(),
            len: entry.value.len() as u64,
            t: entry.t,
            frozen: entry.frozen,
            trainable: entry.trainable,
            value_offset,
            m_offset,
            v_offset,
        });
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        extra: extra.clone(),
        params,
        blob_len: blob.len() as u64,
        blob_crc32: crc32fast::hash(&blob),
    };
    let mut mf = fs::File::create(dir.join(MANIFEST_FILE))?;
    mf.write_all(&serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?)?;
    mf.write_all(b"\n")?;
    fs::write(dir.join(BLOB_FILE), &blob)?;
    Ok(())
}

/// Load a checkpoint directory back into a store plus its `extra` section.
pub fn load_store(dir: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "not a checkpoint manifest (format tag {:?})",
            manifest.format
        )));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {} (supported: {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;
    if blob.len() as u64 != manifest.blob_len {
        return Err(Error::Format(format!(
            "blob length {} does not match manifest ({})",
            blob.len(),
            manifest.blob_len
        )));
    }
    if crc32fast::hash(&blob) != manifest.blob_crc32 {
        return Err(Error::Format("blob checksum mismatch".into()));
    }
    let mut store = ParamStore::new();
    for rec in &manifest.params {
        let expected: usize = rec.shape.iter().product();
        if expected as u64 != rec.len {
            return Err(Error::Format(format!(
                "param {}: shape {:?} does not match len {}",
                rec.name, rec.shape, rec.len
            )));
        }
        let value = read_f64s(&blob, rec.value_offset, rec.len, &rec.name)?;
        let m = read_f64s(&blob, rec.m_offset, rec.len, &rec.name)?;
        let v = read_f64s(&blob, rec.v_offset, rec.len, &rec.name)?;
        let tensor = Tensor::new(rec.shape.clone(), value)?;
        if rec.trainable {
            store.insert(&rec.name, tensor)?;
        } else {
            store.insert_buffer(&rec.name, tensor)?;
        }
        let entry: &mut ParamEntry = store.entries_mut().get_mut(&rec.name).unwrap();
        entry.m = m;
        entry.v = v;
        entry.t = rec.t;
        entry.frozen = rec.frozen;
    }
    Ok((store, manifest.extra))
}
