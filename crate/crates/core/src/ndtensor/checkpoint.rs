//! Versioned checkpoint files: a JSON manifest line followed by a flat
//! little-endian f64 blob. Magic string "MSTA-CKPT-1".

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::array::NdArray;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "MSTA-CKPT-1";

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    magic: String,
    dtype: String,
    entries: Vec<ManifestEntry>,
    blob_sha256: String,
    meta: serde_json::Value,
}

/// Named parameter arrays plus arbitrary JSON metadata (architecture,
/// optimizer counters, loss statistics, RNG progress).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub entries: Vec<(String, NdArray)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NdArray> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(ckpt.entries.len());
    for (name, arr) in &ckpt.entries {
        let offset = blob.len() as u64;
        for v in arr.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            offset,
            len: arr.len() as u64,
        });
    }
    let manifest = Manifest {
        magic: CHECKPOINT_MAGIC.to_string(),
        dtype: "f64-le".to_string(),
        entries,
        blob_sha256: hex_digest(&blob),
        meta: ckpt.meta.clone(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.write_all(&blob)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(Error::Checkpoint("missing manifest line".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
    }
    let manifest: Manifest = serde_json::from_slice(&header)?;
    if manifest.magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version `{}`",
            manifest.magic
        )));
    }
    if manifest.dtype != "f64-le" {
        return Err(Error::Checkpoint(format!("unsupported dtype `{}`", manifest.dtype)));
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let found = hex_digest(&blob);
    if found != manifest.blob_sha256 {
        return Err(Error::ChecksumMismatch {
            expected: manifest.blob_sha256,
            found,
        });
    }
    let mut entries = Vec::with_capacity(manifest.entries.len());
    for e in manifest.entries {
        let start = e.offset as usize;
        let end = start + (e.len as usize) * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("entry `{}` exceeds blob", e.name)));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((e.name, NdArray::new(e.shape, data)?));
    }
    Ok(Checkpoint {
        entries,
        meta: manifest.meta,
    })
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint {
            entries: vec![
                ("w".into(), NdArray::new(vec![2, 2], vec![1.5, -0.25, 1e-300, 3.0]).unwrap()),
                ("b".into(), NdArray::from_vec(vec![0.125])),
            ],
            meta: serde_json::json!({"step": 7}),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.entries, ckpt.entries);
        assert_eq!(loaded.meta["step"], 7);
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint {
            entries: vec![("w".into(), NdArray::from_vec(vec![1.0, 2.0]))],
            meta: serde_json::Value::Null,
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::ChecksumMismatch { .. }) => {}
            other => panic!("expected checksum error, got {other:?}"),
        }
    }
}
