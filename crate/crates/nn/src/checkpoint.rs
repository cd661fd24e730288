//! Versioned binary checkpoints.
//!
//! Layout: magic `QPCK`, `u32` format version, `u64` header length, the JSON
//! header, then every parameter's values as little-endian `f64` in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::params::ParamStore;
use crate::Tensor;

pub const MAGIC: &[u8; 4] = b"QPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("architecture mismatch: expected {expected}, found {found}")]
    ArchitectureMismatch { expected: String, found: String },
    #[error("vocabulary hash mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("feature schema hash mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },
    #[error("parameter block hash mismatch")]
    Corrupt,
    #[error("parameter {name}: {reason}")]
    Parameter { name: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: String,
    /// Model configuration needed to rebuild the parameter layout.
    pub config: Value,
    #[serde(default)]
    pub vocab_hash: Option<String>,
    #[serde(default)]
    pub schema_hash: Option<String>,
    /// Free-form extras (normalization statistics, label maps, ...).
    #[serde(default)]
    pub extra: Value,
    #[serde(default)]
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub data_sha256: String,
}

impl CheckpointHeader {
    pub fn new(architecture: &str, config: Value) -> Self {
        Self {
            architecture: architecture.to_owned(),
            config,
            vocab_hash: None,
            schema_hash: None,
            extra: Value::Null,
            params: Vec::new(),
            data_sha256: String::new(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes `store` under `header`; the parameter table and data hash are
/// filled in from the store.
pub fn to_bytes(header: &CheckpointHeader, store: &ParamStore) -> Vec<u8> {
    let mut data = Vec::with_capacity(store.scalar_count() * 8);
    let mut header = header.clone();
    header.params.clear();
    for (_, p) in store.iter() {
        header.params.push(ParamEntry {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
            trainable: p.trainable,
        });
        for x in p.value.data() {
            data.extend_from_slice(&x.to_le_bytes());
        }
    }
    header.data_sha256 = sha256_hex(&data);
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

/// Parses a checkpoint, verifying its structure and data hash.
pub fn from_bytes(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore), CheckpointError> {
    if bytes.len() < 16 {
        return Err(if bytes.len() >= 4 && &bytes[..4] != MAGIC { CheckpointError::BadMagic } else { CheckpointError::Truncated });
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < hlen {
        return Err(CheckpointError::Truncated);
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let data = &body[hlen..];
    let expected: usize = header.params.iter().map(|p| p.rows * p.cols * 8).sum();
    if data.len() < expected {
        return Err(CheckpointError::Truncated);
    }
    if data.len() > expected {
        return Err(CheckpointError::Header("trailing bytes after parameter block".into()));
    }
    if sha256_hex(data) != header.data_sha256 {
        return Err(CheckpointError::Corrupt);
    }
    let mut store = ParamStore::new();
    let mut off = 0;
    for p in &header.params {
        let n = p.rows * p.cols;
        let values = data[off..off + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        off += n * 8;
        let t = Tensor::new(p.rows, p.cols, values).expect("sizes agree");
        store.add(&p.name, t, p.trainable);
    }
    Ok((header, store))
}

pub fn save(path: &Path, header: &CheckpointHeader, store: &ParamStore) -> Result<String, CheckpointError> {
    let bytes = to_bytes(header, store);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, ParamStore), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// Fails unless `header` was written by `architecture` with matching hashes.
pub fn check_compatible(
    header: &CheckpointHeader,
    architecture: &str,
    vocab_hash: Option<&str>,
    schema_hash: Option<&str>,
) -> Result<(), CheckpointError> {
    if header.architecture != architecture {
        return Err(CheckpointError::ArchitectureMismatch {
            expected: architecture.to_owned(),
            found: header.architecture.clone(),
        });
    }
    if let Some(v) = vocab_hash {
        if header.vocab_hash.as_deref() != Some(v) {
            return Err(CheckpointError::VocabMismatch {
                expected: v.to_owned(),
                found: header.vocab_hash.clone().unwrap_or_default(),
            });
        }
    }
    if let Some(s) = schema_hash {
        if header.schema_hash.as_deref() != Some(s) {
            return Err(CheckpointError::SchemaMismatch {
                expected: s.to_owned(),
                found: header.schema_hash.clone().unwrap_or_default(),
            });
        }
    }
    Ok(())
}

/// Copies checkpoint values into a freshly built store with the same layout.
pub fn restore_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<(), CheckpointError> {
    if target.len() != loaded.len() {
        return Err(CheckpointError::Parameter {
            name: "*".into(),
            reason: format!("expected {} parameters, checkpoint has {}", target.len(), loaded.len()),
        });
    }
    let ids: Vec<_> = target.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape())).collect();
    for (id, name, shape) in ids {
        let src = loaded.find(&name).ok_or_else(|| CheckpointError::Parameter {
            name: name.clone(),
            reason: "missing from checkpoint".into(),
        })?;
        let v = loaded.value(src);
        if v.shape() != shape {
            return Err(CheckpointError::Parameter {
                name,
                reason: format!("shape {:?} in checkpoint, {:?} expected", v.shape(), shape),
            });
        }
        *target.value_mut(id) = v.clone();
        let trainable = loaded.get(src).trainable;
        target.set_trainable(id, trainable);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(2, 2, vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap(), true);
        s.add("bn.running_mean", Tensor::row_vector(vec![0.125]), false);
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut h = CheckpointHeader::new("toy", json!({"d": 2}));
        h.vocab_hash = Some("abc".into());
        let bytes = to_bytes(&h, &store());
        let (h2, s2) = from_bytes(&bytes).unwrap();
        assert_eq!(s2, store());
        assert_eq!(h2.vocab_hash.as_deref(), Some("abc"));
        assert_eq!(to_bytes(&h2, &s2), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let h = CheckpointHeader::new("toy", Value::Null);
        let mut bytes = to_bytes(&h, &store());
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated)));
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::Corrupt)));
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::BadMagic)));
        let mut v2 = to_bytes(&h, &store());
        v2[4] = 9;
        assert!(matches!(from_bytes(&v2), Err(CheckpointError::UnsupportedVersion(9))));
    }

    #[test]
    fn compatibility_checks() {
        let mut h = CheckpointHeader::new("toy", Value::Null);
        h.vocab_hash = Some("v1".into());
        assert!(check_compatible(&h, "toy", Some("v1"), None).is_ok());
        assert!(matches!(check_compatible(&h, "other", None, None), Err(CheckpointError::ArchitectureMismatch { .. })));
        assert!(matches!(check_compatible(&h, "toy", Some("v2"), None), Err(CheckpointError::VocabMismatch { .. })));
        let mut target = ParamStore::new();
        target.add("a", Tensor::zeros(2, 2), true);
        assert!(restore_into(&mut target, &store()).is_err());
    }
}
