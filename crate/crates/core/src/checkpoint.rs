//! Probe checkpoint files.
//!
//! ```text
//! magic      8 bytes  "PRBSEG\0\x01"
//! version    u32 LE
//! header_len u32 LE
//! header     JSON: feature_dim, num_classes, standardized, config, store_hash, provenance
//! weight     feature_dim * num_classes f32 LE, row-major (Z x C)
//! bias       num_classes f32 LE
//! [mean, inv_std]  feature_dim f32 LE each, only when standardized
//! ```
//!
//! The header holds no timestamps, so identical training runs produce
//! byte-identical checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::atomic_write;
use crate::labels::Provenance;
use crate::probe::{ProbeParams, Standardizer, TrainConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PRBSEG\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    feature_dim: usize,
    num_classes: usize,
    standardized: bool,
    config: TrainConfig,
    store_hash: String,
    provenance: Option<Provenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ProbeParams<f32>,
    pub config: TrainConfig,
    pub store_hash: String,
    pub provenance: Option<Provenance>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let header = Header {
            feature_dim: p.feature_dim(),
            num_classes: p.num_classes(),
            standardized: p.standardizer.is_some(),
            config: self.config.clone(),
            store_hash: self.store_hash.clone(),
            provenance: self.provenance,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |v: &[f32]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        put(p.weight.data());
        put(&p.bias);
        if let Some(s) = &p.standardizer {
            put(&s.mean);
            put(&s.inv_std);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: &str| Error::Checkpoint {
            path: path.into(),
            message: message.into(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a probe checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header_bytes = bytes.get(16..16 + header_len).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| bad(&e.to_string()))?;
        let (z, c) = (header.feature_dim, header.num_classes);
        let floats = z * c + c + if header.standardized { 2 * z } else { 0 };
        let body = &bytes[16 + header_len..];
        if body.len() != floats * 4 {
            return Err(bad(&format!(
                "expected {} payload bytes, found {}",
                floats * 4,
                body.len()
            )));
        }
        let mut values = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        let mut take = |n: usize| values.by_ref().take(n).collect::<Vec<f32>>();
        let weight = Tensor::new(vec![z, c], take(z * c)).map_err(|e| bad(&e.to_string()))?;
        let mut params = ProbeParams::new(weight, take(c)).map_err(|e| bad(&e.to_string()))?;
        if header.standardized {
            params.standardizer = Some(Standardizer {
                mean: take(z),
                inv_std: take(z),
            });
        }
        Ok(Self {
            params,
            config: header.config,
            store_hash: header.store_hash,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        atomic_write(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
