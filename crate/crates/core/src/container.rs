//! Binary container shared by checkpoints, archives and prediction stacks.
//!
//! Layout: 8-byte magic, `u32` version, `u64` manifest length, UTF-8 JSON
//! manifest, then the datasets as concatenated little-endian `f32` blobs.
//! Manifest offsets are relative to the start of the blob section.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use wfn_tensor::Tensor;

use crate::error::{FormatError, Result};

pub const MAGIC: &[u8; 8] = b"WFNCONT\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
    role: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    datasets: Vec<DatasetEntry>,
    metadata: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub role: String,
    pub tensor: Tensor<f32>,
}

/// Named `float32` datasets plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub datasets: BTreeMap<String, Dataset>,
    pub metadata: Value,
}

impl Default for Container {
    fn default() -> Self {
        Self::new()
    }
}

impl Container {
    pub fn new() -> Self {
        Self {
            datasets: BTreeMap::new(),
            metadata: Value::Object(Default::default()),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, role: impl Into<String>, tensor: Tensor<f32>) {
        self.datasets.insert(
            name.into(),
            Dataset {
                role: role.into(),
                tensor,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.datasets
            .get(name)
            .map(|d| &d.tensor)
            .ok_or_else(|| FormatError::MissingDataset(name.to_string()).into())
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor<f32>> {
        self.datasets
            .remove(name)
            .map(|d| d.tensor)
            .ok_or_else(|| FormatError::MissingDataset(name.to_string()).into())
    }

    /// Dataset `name`, checked against `expected` where `None` matches any extent.
    pub fn get_shaped(&self, name: &str, expected: &[Option<usize>]) -> Result<&Tensor<f32>> {
        let t = self.get(name)?;
        let ok = t.shape().len() == expected.len() && t.shape().iter().zip(expected).all(|(&d, e)| e.is_none_or(|e| e == d));
        if !ok {
            let want: Vec<String> = expected.iter().map(|e| e.map_or("*".into(), |v| v.to_string())).collect();
            return Err(FormatError::ShapeMismatch {
                name: name.to_string(),
                expected: format!("[{}]", want.join(",")),
                found: t.shape().to_vec(),
            }
            .into());
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let datasets = self
            .datasets
            .iter()
            .map(|(name, d)| {
                let nbytes = 4 * d.tensor.len() as u64;
                let e = DatasetEntry {
                    name: name.clone(),
                    dtype: "float32".into(),
                    shape: d.tensor.shape().to_vec(),
                    offset,
                    nbytes,
                    role: d.role.clone(),
                };
                offset += nbytes;
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            datasets,
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for d in self.datasets.values() {
            for v in d.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |needed: usize| -> Result<()> {
            if bytes.len() < needed {
                return Err(FormatError::Truncated {
                    needed: needed as u64,
                    available: bytes.len() as u64,
                }
                .into());
            }
            Ok(())
        };
        need(MAGIC.len())?;
        if &bytes[..8] != MAGIC {
            return Err(FormatError::BadMagic.into());
        }
        need(HEADER_LEN)?;
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(FormatError::Version(version).into());
        }
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let blob_start = (HEADER_LEN as u64)
            .checked_add(manifest_len)
            .filter(|&v| v <= usize::MAX as u64)
            .ok_or_else(|| FormatError::Manifest("manifest length overflows".into()))? as usize;
        need(blob_start)?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..blob_start])
            .map_err(|e| FormatError::Manifest(e.to_string()))?;

        let mut datasets = BTreeMap::new();
        for e in manifest.datasets {
            if e.dtype != "float32" {
                return Err(FormatError::DtypeMismatch {
                    name: e.name,
                    found: e.dtype,
                }
                .into());
            }
            let count = e.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            if count.and_then(|c| c.checked_mul(4)).map(|b| b as u64) != Some(e.nbytes) {
                return Err(FormatError::Manifest(format!("dataset `{}`: shape {:?} does not match {} bytes", e.name, e.shape, e.nbytes)).into());
            }
            let start = blob_start as u64 + e.offset;
            let end = start
                .checked_add(e.nbytes)
                .filter(|&v| v <= usize::MAX as u64)
                .ok_or_else(|| FormatError::Manifest(format!("dataset `{}` offset overflows", e.name)))?;
            need(end as usize)?;
            let data = bytes[start as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if datasets.contains_key(&e.name) {
                return Err(FormatError::Manifest(format!("duplicate dataset `{}`", e.name)).into());
            }
            datasets.insert(
                e.name,
                Dataset {
                    role: e.role,
                    tensor: Tensor::new(e.shape, data)?,
                },
            );
        }
        Ok(Self {
            datasets,
            metadata: manifest.metadata,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
