//! Versioned binary container: a canonical JSON manifest (sorted keys)
//! followed by raw little-endian IEEE-754 tensor payloads.
//!
//! Layout:
//!
//! ```text
//! bytes 0..8    magic  "MOEADPTC"
//! bytes 8..12   u32 LE container version (1)
//! bytes 12..20  u64 LE manifest byte length
//! ...           manifest JSON
//! ...           payload (concatenated tensors at the manifest offsets)
//! ```
//!
//! The manifest records per-tensor name, dtype, shape, offset, and byte
//! length plus a SHA-256 of the payload. Writes are atomic (temp file +
//! rename). Round-trips are byte-exact: the manifest is always serialized
//! through a sorted-key `serde_json::Value` and payload bytes are copied
//! verbatim, so f32 payloads survive save -> load -> save bit-for-bit.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MOEADPTC";
const VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Canonical JSON: object keys sorted (serde_json::Value maps are BTreeMaps).
pub fn canonical_json<S: Serialize>(value: &S) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub byte_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    kind: String,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
    meta: serde_json::Value,
}

/// In-memory container: kind tag, free-form metadata, named tensors.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
            payload: Vec::new(),
        }
    }

    /// Append a tensor with the scalar type's own dtype.
    pub fn push_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        self.push_tensor_as(name, t, T::DTYPE);
    }

    /// Append a tensor stored as `dtype` (casting through f64 if needed).
    pub fn push_tensor_as<T: Scalar>(&mut self, name: &str, t: &Tensor<T>, dtype: Dtype) {
        let offset = self.payload.len();
        match dtype {
            Dtype::F32 => {
                for &v in t.data() {
                    self.payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in t.data() {
                    self.payload.extend_from_slice(&v.to_f64().to_le_bytes());
                }
            }
        }
        self.tensors.push(TensorEntry {
            name: name.to_string(),
            dtype,
            shape: t.shape().to_vec(),
            offset,
            byte_len: t.numel() * dtype.size_bytes(),
        });
    }

    pub fn tensor_entries(&self) -> &[TensorEntry] {
        &self.tensors
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.iter().any(|e| e.name == name)
    }

    /// Read a tensor back, casting from its stored dtype to `T`.
    pub fn get_tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let entry = self
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::FormatError(format!("missing tensor '{name}'")))?;
        let bytes = &self.payload[entry.offset..entry.offset + entry.byte_len];
        let data: Vec<T> = match entry.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        Tensor::new(entry.shape.clone(), data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format: "moe-adapter-container".to_string(),
            version: VERSION,
            kind: self.kind.clone(),
            tensors: self.tensors.clone(),
            payload_sha256: sha256_hex(&self.payload),
            meta: self.meta.clone(),
        };
        let manifest_json = canonical_json(&manifest)?;
        let mut out = Vec::with_capacity(20 + manifest_json.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest_json.as_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        if bytes.len() < 20 || &bytes[0..8] != MAGIC {
            return Err(Error::FormatError("bad magic".to_string()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::FormatError(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if bytes.len() < 20 + mlen {
            return Err(Error::FormatError("truncated manifest".to_string()));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[20..20 + mlen])?;
        let payload = bytes[20 + mlen..].to_vec();
        let got = sha256_hex(&payload);
        if got != manifest.payload_sha256 {
            return Err(Error::ChecksumMismatch {
                expected: manifest.payload_sha256,
                got,
            });
        }
        for e in &manifest.tensors {
            let numel: usize = e.shape.iter().product();
            if e.offset + e.byte_len > payload.len() || numel * e.dtype.size_bytes() != e.byte_len
            {
                return Err(Error::FormatError(format!(
                    "tensor '{}' entry inconsistent with payload",
                    e.name
                )));
            }
        }
        Ok(Container {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors: manifest.tensors,
            payload,
        })
    }

    /// Atomic write: temp file in the target directory, then rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("container")
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Container> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_exact() {
        let mut c = Container::new("checkpoint", serde_json::json!({"seed": 7}));
        c.push_tensor("a", &Tensor::<f32>::from_vec(vec![1.5, -2.25, 0.1]));
        c.push_tensor("b", &Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let a: Tensor<f32> = back.get_tensor("a").unwrap();
        assert!(a.bits_eq(&Tensor::from_vec(vec![1.5, -2.25, 0.1])));
        let b: Tensor<f64> = back.get_tensor("b").unwrap();
        assert_eq!(b.shape(), &[2, 2]);
    }

    #[test]
    fn corrupting_payload_fails_checksum() {
        let mut c = Container::new("checkpoint", serde_json::json!({}));
        c.push_tensor("a", &Tensor::<f32>::from_vec(vec![1.0, 2.0]));
        let mut bytes = c.to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::ChecksumMismatch { .. }));
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut c = Container::new("x", serde_json::json!({}));
        c.push_tensor("a", &Tensor::<f32>::from_vec(vec![1.0]));
        let mut bytes = c.to_bytes().unwrap();
        bytes[8] = 99;
        assert!(matches!(
            Container::from_bytes(&bytes).unwrap_err(),
            Error::FormatError(_)
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Container::from_bytes(&bytes).unwrap_err(),
            Error::FormatError(_)
        ));
    }

    #[test]
    fn f32_payload_survives_f64_round_trip_casts() {
        // store f64 tensor as f32, read back as f32: exact f32 bits
        let t64 = Tensor::<f64>::from_vec(vec![0.1, 0.2, 0.3]);
        let mut c = Container::new("x", serde_json::json!({}));
        c.push_tensor_as("t", &t64, Dtype::F32);
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        let t32: Tensor<f32> = back.get_tensor("t").unwrap();
        let expect: Tensor<f32> = t64.cast();
        assert!(t32.bits_eq(&expect));
    }
}
