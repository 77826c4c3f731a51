//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MPTSNET\0"              8-byte magic
//! header_len: u64
//! header: JSON               format_version, config, periods, normalization,
//!                            label_names, manifest [{name, shape, offset}]
//! payload: f32 values        parameters in manifest order, offsets in bytes
//! sha256: [u8; 32]           over every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::spectral::PeriodSet;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MPTSNET\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    periods: PeriodSet,
    normalization: Option<NormalizationStats>,
    label_names: Vec<String>,
    manifest: Vec<ManifestEntry>,
}

/// A trained model plus what is needed to apply it to raw data.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub normalization: Option<NormalizationStats>,
    pub label_names: Vec<String>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::new();
        let mut payload = Vec::new();
        for (name, t) in self.model.params.entries() {
            manifest.push(ManifestEntry {
                name,
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.model.config.clone(),
            periods: self.model.periods.clone(),
            normalization: self.normalization.clone(),
            label_names: self.label_names.clone(),
            manifest,
        };
        let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 + 32 {
            return Err(corrupt("file is truncated"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt(
                "checksum mismatch; the file is corrupted or truncated",
            ));
        }
        let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&body[16..header_end])
            .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let payload = &body[header_end..];
        let template = ModelParams::<f32>::init(&header.config, 0)?;
        let expected = template.entries();
        if expected.len() != header.manifest.len() {
            return Err(corrupt("manifest does not match the stored configuration"));
        }
        let mut tensors = Vec::with_capacity(expected.len());
        let mut cursor = 0u64;
        for ((name, want), entry) in expected.iter().zip(&header.manifest) {
            if *name != entry.name
                || want.shape() != entry.shape.as_slice()
                || entry.offset != cursor
            {
                return Err(corrupt(format!(
                    "manifest entry {:?} is inconsistent",
                    entry.name
                )));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * n;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| corrupt(format!("payload too short for {:?}", entry.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor::new(entry.shape.clone(), data)?);
            cursor = end as u64;
        }
        if cursor as usize != payload.len() {
            return Err(corrupt("trailing bytes after the payload"));
        }
        let params = template.from_ordered(tensors)?;
        let model = Model::new(header.config, header.periods, params)?;
        Ok(Self {
            model,
            normalization: header.normalization,
            label_names: header.label_names,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Errors unless the stored configuration equals `expected`.
    pub fn ensure_config(&self, expected: &ModelConfig) -> Result<()> {
        if self.model.config != *expected {
            return Err(Error::config(format!(
                "checkpoint configuration {:?} does not match the requested {:?}",
                self.model.config, expected
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ck.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
