//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `WGTS`, version `u16`, entry count `u32`,
//! then per entry `name_len u16, name, dtype u8, rank u8, extents u64…,
//! offset u64, length u64`, then the blob of `f64` data. Offsets are
//! relative to the start of the blob.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Segmenter, SegmenterConfig};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: [u8; 4] = *b"WGTS";
pub const VERSION: u16 = 1;
pub const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: u8,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

/// Serializes every parameter of `store` in registration order.
pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut head = Vec::new();
    let mut blob = Vec::new();
    head.extend_from_slice(&MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        let name = p.name.as_bytes();
        head.extend_from_slice(&(name.len() as u16).to_le_bytes());
        head.extend_from_slice(name);
        head.push(DTYPE_F64);
        head.push(p.tensor.rank() as u8);
        for &e in p.tensor.shape() {
            head.extend_from_slice(&(e as u64).to_le_bytes());
        }
        head.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        head.extend_from_slice(&(8 * p.tensor.numel() as u64).to_le_bytes());
        for v in p.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    head.extend_from_slice(&blob);
    head
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated(format!("file ends inside {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses and validates a checkpoint into named tensors.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::new();
    for i in 0..count {
        let what = format!("manifest entry {i}");
        let len = r.u16(&what)? as usize;
        let name = String::from_utf8(r.take(len, &what)?.to_vec())
            .map_err(|_| Error::ManifestMismatch(format!("entry {i} name is not UTF-8")))?;
        let dtype = r.u8(&what)?;
        let rank = r.u8(&what)? as usize;
        let shape = (0..rank)
            .map(|_| r.u64(&what).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64(&what)?;
        let length = r.u64(&what)?;
        entries.push(ManifestEntry {
            name,
            dtype,
            shape,
            offset,
            length,
        });
    }
    let blob = &bytes[r.pos..];
    validate_manifest(&entries, blob.len() as u64)?;
    entries
        .into_iter()
        .map(|e| {
            let raw = &blob[e.offset as usize..(e.offset + e.length) as usize];
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, data)
                .map_err(|err| Error::ManifestMismatch(format!("{}: {err}", e.name)))?;
            Ok((e.name, t))
        })
        .collect()
}

fn validate_manifest(entries: &[ManifestEntry], blob_len: u64) -> Result<()> {
    let mut spans = Vec::with_capacity(entries.len());
    let mut total: u64 = 0;
    for e in entries {
        if e.dtype != DTYPE_F64 {
            return Err(Error::ManifestMismatch(format!(
                "{}: unknown dtype tag {}",
                e.name, e.dtype
            )));
        }
        let numel = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        if numel.and_then(|n| n.checked_mul(8)) != Some(e.length) {
            return Err(Error::ManifestMismatch(format!(
                "{}: {} bytes for shape {:?}",
                e.name, e.length, e.shape
            )));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .ok_or_else(|| Error::ManifestMismatch(format!("{}: offset overflow", e.name)))?;
        if end > blob_len {
            return Err(Error::Truncated(format!(
                "blob holds {blob_len} bytes, {} needs up to byte {end}",
                e.name
            )));
        }
        spans.push((e.offset, end));
        total += e.length;
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[0].1 > w[1].0) {
        return Err(Error::ManifestMismatch("overlapping blob ranges".into()));
    }
    if total != blob_len {
        return Err(Error::ManifestMismatch(format!(
            "blob holds {blob_len} bytes, manifest accounts for {total}"
        )));
    }
    Ok(())
}

pub fn save_checkpoint(model: &Segmenter, path: &Path) -> Result<()> {
    fs::write(path, encode(model.store()))?;
    Ok(())
}

/// Overwrites the parameters of `store` from `tensors`; nothing is changed
/// unless every name and shape matches.
pub fn restore(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::ManifestMismatch(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    let mut resolved = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let id = store
            .id_of(&name)
            .ok_or_else(|| Error::ManifestMismatch(format!("model has no parameter `{name}`")))?;
        if store.tensor(id).shape() != t.shape() {
            return Err(Error::ManifestMismatch(format!(
                "`{name}`: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                store.tensor(id).shape()
            )));
        }
        resolved.push((id, t));
    }
    for (id, t) in resolved {
        store.tensor_mut(id).data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

/// Loads a checkpoint into an existing model, leaving it untouched on error.
pub fn load_into(model: &mut Segmenter, path: &Path) -> Result<()> {
    let tensors = decode(&fs::read(path)?)?;
    restore(model.store_mut(), tensors)
}

/// Builds the model described by `config` and loads its parameters.
pub fn load_checkpoint(path: &Path, config: SegmenterConfig) -> Result<Segmenter> {
    let mut model = Segmenter::new(config)?;
    load_into(&mut model, path)?;
    Ok(model)
}
