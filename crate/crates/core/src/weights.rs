//! Named-tensor checkpoints: a flat little-endian float64 blob plus a JSON
//! manifest giving each tensor's name, shape and byte offset.
//!
//! Files are written to a temporary sibling and renamed into place, blob
//! first and manifest last, so a manifest on disk always describes a
//! complete blob.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffkit::Tensor;
use crate::error::{Error, Result};

pub const FORMAT: &str = "promptalign-f64le-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub blob: String,
    pub byte_len: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

pub type NamedTensors = Vec<(String, Tensor)>;

/// SHA-256 over names, shapes and raw bits, hex encoded.
pub fn checksum<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        h.update([0u8]);
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `path` by streaming into `path.tmp` and renaming. On any error the
/// temporary file is removed and `path` is left untouched.
pub fn write_atomic(
    path: &Path,
    fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<()> {
    let tmp = tmp_path(path);
    let result = (|| {
        let file = fs::File::create(&tmp)?;
        let mut w = std::io::BufWriter::new(file);
        fill(&mut w)?;
        w.flush()?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn blob_bytes(tensors: &[(String, &Tensor)]) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset: bytes.len() });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (bytes, entries)
}

/// Saves `stem.bin` and `stem.json` under `dir`.
pub fn save(
    dir: &Path,
    stem: &str,
    tensors: &[(String, &Tensor)],
    meta: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (bytes, entries) = blob_bytes(tensors);
    let blob_name = format!("{stem}.bin");
    let manifest = Manifest {
        format: FORMAT.to_string(),
        blob: blob_name.clone(),
        byte_len: bytes.len(),
        tensors: entries,
        meta,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(&blob_name), |w| w.write_all(&bytes))?;
    write_atomic(&dir.join(format!("{stem}.json")), |w| w.write_all(&json))?;
    Ok(())
}

pub fn load(dir: &Path, stem: &str) -> Result<(NamedTensors, Manifest)> {
    let manifest_path = dir.join(format!("{stem}.json"));
    let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::parse(e.column(), format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::parse(0, format!("unknown format {:?}", manifest.format)));
    }
    let blob_path = dir.join(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let tensors = decode_blob(&bytes, &manifest)?;
    Ok((tensors, manifest))
}

pub fn decode_blob(bytes: &[u8], manifest: &Manifest) -> Result<NamedTensors> {
    if bytes.len() != manifest.byte_len {
        return Err(Error::parse(
            bytes.len(),
            format!("blob holds {} bytes, manifest expects {}", bytes.len(), manifest.byte_len),
        ));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + numel * 8;
        if end > bytes.len() {
            return Err(Error::parse(entry.offset, format!("tensor {} runs past the blob", entry.name)));
        }
        let data = bytes[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::parse(entry.offset, format!("{}: {e}", entry.name)))?;
        out.push((entry.name.clone(), t));
    }
    Ok(out)
}

/// Removes and returns the tensor called `name`.
pub fn take(tensors: &mut NamedTensors, name: &str) -> Result<Tensor> {
    let pos = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Invalid(format!("checkpoint lacks tensor {name}")))?;
    Ok(tensors.remove(pos).1)
}
