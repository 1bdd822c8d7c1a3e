//! Binary checkpoint container.
//!
//! Layout: a magic line, one line of JSON header, then the little-endian
//! tensor payload. The header lists every tensor with its byte offset and
//! carries model metadata.

use std::path::Path;

use anchor_nn::{ParamSet, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::IoContext;
use crate::{AnchorError, Result};

const MAGIC: &[u8] = b"ANCHOR-CKPT\n";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    dtype: String,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// Named tensors plus free-form metadata under a format tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub format: String,
    pub tensors: Vec<(String, Tensor<T>)>,
    pub meta: serde_json::Value,
    /// Element type of the serialized payload.
    pub stored_dtype: String,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(format: &str, meta: serde_json::Value) -> Self {
        Self {
            format: format.to_string(),
            tensors: Vec::new(),
            meta,
            stored_dtype: T::DTYPE.to_string(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.push((name.into(), tensor));
    }

    /// Adds every tensor of `set`, prefixing names with `prefix`.
    pub fn push_set(&mut self, prefix: &str, set: &ParamSet<T>) {
        for (name, t) in set.iter() {
            self.push(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| AnchorError::Format {
                what: self.format.clone(),
                reason: format!("missing tensor {name}"),
            })
    }

    /// Overwrites every tensor of `set` from entries named `prefix + name`.
    pub fn fill_set(&self, prefix: &str, set: &mut ParamSet<T>) -> Result<()> {
        let names: Vec<String> = set.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let src = self.tensor(&format!("{prefix}{name}"))?;
            let id = set.find(&name).expect("name from the same set");
            if src.shape() != set.get(id).shape() {
                return Err(AnchorError::Format {
                    what: self.format.clone(),
                    reason: format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        src.shape(),
                        set.get(id).shape()
                    ),
                });
            }
            *set.get_mut(id) = src.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
        let header = Header {
            format: self.format.clone(),
            dtype: T::DTYPE.to_string(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let mut out = MAGIC.to_vec();
        out.extend(serde_json::to_vec(&header).expect("header serializes"));
        out.push(b'\n');
        out.extend(payload);
        out
    }

    /// Parses a checkpoint, converting the stored dtype to `T` if needed.
    pub fn from_bytes(bytes: &[u8], expected_format: &str) -> Result<Self> {
        let bad = |reason: String| AnchorError::Format {
            what: expected_format.to_string(),
            reason,
        };
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| bad("missing checkpoint magic".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&rest[..nl]).map_err(|e| bad(e.to_string()))?;
        if header.format != expected_format {
            return Err(bad(format!("found format {}", header.format)));
        }
        let payload = &rest[nl + 1..];
        let tensors = header
            .tensors
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let data = match header.dtype.as_str() {
                    "f32" => decode::<f32, T>(payload, e.offset, n),
                    "f64" => decode::<f64, T>(payload, e.offset, n),
                    other => return Err(bad(format!("unknown dtype {other}"))),
                }
                .ok_or_else(|| bad(format!("payload too short for {}", e.name)))?;
                Ok((e.name.clone(), Tensor::new(&e.shape, data)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            format: header.format,
            tensors,
            meta: header.meta,
            stored_dtype: header.dtype,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        std::fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path, expected_format: &str) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::from_bytes(&bytes, expected_format).map_err(|e| match e {
            AnchorError::Format { reason, .. } => AnchorError::Corruption {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

fn decode<S: Scalar, T: Scalar>(payload: &[u8], offset: usize, n: usize) -> Option<Vec<T>> {
    let end = offset.checked_add(n.checked_mul(S::BYTES)?)?;
    let bytes = payload.get(offset..end)?;
    Some(
        bytes
            .chunks_exact(S::BYTES)
            .map(|c| T::lit(S::read_le(c).as_f64()))
            .collect(),
    )
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).at(path)?))
}

/// Digest over tensor names, shapes and values, in order.
///
/// Values are hashed as `f64`, so an `f32` model and its exact widening to
/// `f64` share a digest.
pub fn tensor_digest<'a, T: Scalar>(
    tag: &str,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> String {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    let mut buf = Vec::new();
    for (name, t) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        buf.clear();
        for &v in t.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        h.update(&buf);
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_dtype_conversion() {
        let mut ck = Checkpoint::<f32>::new("anchor-test/1", serde_json::json!({"k": 3}));
        ck.push("a.weight", Tensor::new(&[2, 2], vec![1.0, -2.5, 3.25, 0.0]));
        ck.push("b", Tensor::new(&[1], vec![7.0]));
        let bytes = ck.to_bytes();
        assert_eq!(
            Checkpoint::<f32>::from_bytes(&bytes, "anchor-test/1").unwrap(),
            ck
        );
        let wide = Checkpoint::<f64>::from_bytes(&bytes, "anchor-test/1").unwrap();
        assert_eq!(wide.stored_dtype, "f32");
        assert_eq!(wide.tensor("a.weight").unwrap().data(), &[1.0, -2.5, 3.25, 0.0]);
        assert!(Checkpoint::<f32>::from_bytes(&bytes, "anchor-other/1").is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1], "anchor-test/1").is_err());
    }

    #[test]
    fn digest_depends_on_values_and_names() {
        let t = Tensor::new(&[2], vec![1.0f32, 2.0]);
        let u = Tensor::new(&[2], vec![1.0f32, 2.5]);
        let a = tensor_digest("x", [("w", &t)]);
        assert_eq!(a, tensor_digest("x", [("w", &t)]));
        assert_ne!(a, tensor_digest("x", [("w", &u)]));
        assert_ne!(a, tensor_digest("x", [("v", &t)]));
        assert_eq!(a, tensor_digest("x", [("w", &t.cast::<f64>())]));
    }
}
