//! Named-array container files and atomic file helpers.
//!
//! Payloads are safetensors files: a JSON header followed by little-endian
//! array data. Free-form metadata is stored as a single JSON string under
//! the `meta` key so the header bytes are deterministic.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            shape,
            data: ArrayData::F32(data),
        }
    }

    pub fn u32(shape: Vec<usize>, data: Vec<u32>) -> Self {
        Self {
            shape,
            data: ArrayData::U32(data),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match &self.data {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn dtype(&self) -> Dtype {
        match self.data {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
            ArrayData::U32(_) => Dtype::U32,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            ArrayData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u32(&self) -> Option<&[u32]> {
        match &self.data {
            ArrayData::U32(v) => Some(v),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An in-memory array container with string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayFile {
    pub arrays: BTreeMap<String, NamedArray>,
    pub metadata: BTreeMap<String, String>,
}

impl ArrayFile {
    pub fn insert(&mut self, name: impl Into<String>, array: NamedArray) {
        self.arrays.insert(name.into(), array);
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing array `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let buffers: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = self
            .arrays
            .iter()
            .map(|(name, a)| (name.clone(), a.dtype(), a.shape.clone(), a.bytes()))
            .collect();
        let mut views = Vec::with_capacity(buffers.len());
        for (name, dtype, shape, bytes) in &buffers {
            views.push((name.as_str(), TensorView::new(*dtype, shape.clone(), bytes)?));
        }
        let info = if self.metadata.is_empty() {
            None
        } else {
            let mut m = std::collections::HashMap::new();
            m.insert("meta".to_string(), serde_json::to_string(&self.metadata)?);
            Some(m)
        };
        Ok(safetensors::serialize(views, info)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes)?;
        let metadata = match header.metadata().as_ref().and_then(|m| m.get("meta")) {
            Some(json) => serde_json::from_str(json)?,
            None => BTreeMap::new(),
        };
        let tensors = SafeTensors::deserialize(bytes)?;
        let mut arrays = BTreeMap::new();
        for (name, view) in tensors.iter() {
            let raw = view.data();
            let shape = view.shape().to_vec();
            let data = match view.dtype() {
                Dtype::F32 => ArrayData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::F64 => ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::U32 => ArrayData::U32(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => {
                    return Err(Error::Invalid(format!(
                        "unsupported dtype {other:?} for `{name}`"
                    )))
                }
            };
            arrays.insert(name.to_string(), NamedArray { shape, data });
        }
        Ok(Self { arrays, metadata })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` next to `path` and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Stable hash of any serializable value through its JSON form.
pub fn json_hash<T: serde::Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(sha256_hex(&json))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let mut file = ArrayFile::default();
        file.insert("a", NamedArray::f32(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]));
        file.insert("b", NamedArray::u32(vec![3], vec![7, 0, u32::MAX]));
        file.insert(
            "c",
            NamedArray {
                shape: vec![1],
                data: ArrayData::F64(vec![std::f64::consts::PI]),
            },
        );
        file.metadata.insert("seed".into(), "42".into());
        let bytes = file.to_bytes().unwrap();
        let back = ArrayFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, file);
        assert_eq!(file.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_bytes_fail() {
        let mut file = ArrayFile::default();
        file.insert("a", NamedArray::f32(vec![4], vec![1.0; 4]));
        let bytes = file.to_bytes().unwrap();
        assert!(ArrayFile::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
