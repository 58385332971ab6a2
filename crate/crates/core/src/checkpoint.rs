//! Binary model checkpoints.
//!
//! Layout (integers little-endian): magic `MDT1`, `u32` format version,
//! `u64` header length, the header as JSON with sorted keys, then every
//! tensor as consecutive `f64` values in directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::audio::Standardizer;
use crate::model::{ModelConfig, ModelError, MusicDetModel};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"MDT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("tensor {index} is named {found:?}, expected {expected:?}")]
    TensorNameMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    TensorShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// A trained model with the configuration and loss history that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: MusicDetModel,
    /// Mean training loss (nats/dim) of every epoch.
    pub log: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    model: ModelConfig,
    standardizer: Option<Standardizer>,
    tensors: Vec<TensorEntry>,
    log: Vec<f64>,
    initialized: bool,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let tensors = self
            .model
            .params()
            .entries()
            .iter()
            .map(|e| {
                let entry = TensorEntry {
                    name: e.name.clone(),
                    dims: e.value.shape().to_vec(),
                    offset,
                };
                offset += 8 * e.value.numel() as u64;
                entry
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            model: self.model.config().clone(),
            standardizer: self.model.standardizer.clone(),
            tensors,
            log: self.log.clone(),
            initialized: self.model.is_initialized(),
        };
        // Value maps are ordered, which sorts the keys
        let value = serde_json::to_value(&header).expect("header serializes");
        let json = serde_json::to_vec(&value).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in self.model.params().entries() {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(take(bytes, 4, 4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version });
        }
        let len = u64::from_le_bytes(take(bytes, 8, 8)?.try_into().unwrap());
        let len = usize::try_from(len).map_err(|_| CheckpointError::Truncated)?;
        let json = take(bytes, 16, len)?;
        let value: Value =
            serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let header: Header =
            serde_json::from_value(value).map_err(|e| CheckpointError::Header(e.to_string()))?;

        let mut model = MusicDetModel::identity(header.model)?;
        let payload = &bytes[16 + len..];
        let entries = model.params_mut().entries_mut();
        if header.tensors.len() != entries.len() {
            let index = header.tensors.len().min(entries.len());
            return Err(CheckpointError::TensorNameMismatch {
                index,
                expected: entries.get(index).map_or("<end>".into(), |e| e.name.clone()),
                found: header.tensors.get(index).map_or("<end>".into(), |t| t.name.clone()),
            });
        }
        let mut expected_offset = 0u64;
        for (index, (t, e)) in header.tensors.iter().zip(entries.iter_mut()).enumerate() {
            if t.name != e.name {
                return Err(CheckpointError::TensorNameMismatch {
                    index,
                    expected: e.name.clone(),
                    found: t.name.clone(),
                });
            }
            if t.dims != e.value.shape() {
                return Err(CheckpointError::TensorShapeMismatch {
                    name: t.name.clone(),
                    expected: e.value.shape().to_vec(),
                    found: t.dims.clone(),
                });
            }
            if t.offset != expected_offset {
                return Err(CheckpointError::Header(format!(
                    "tensor {} at offset {}, expected {expected_offset}",
                    t.name, t.offset
                )));
            }
            let n = e.value.numel();
            let raw = take(payload, t.offset as usize, 8 * n)?;
            for (v, c) in e.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(c.try_into().unwrap());
            }
            expected_offset += 8 * n as u64;
        }
        if payload.len() as u64 != expected_offset {
            return Err(CheckpointError::TrailingBytes(
                payload.len() - expected_offset as usize,
            ));
        }
        model.set_initialized(header.initialized);
        model.standardizer = header.standardizer;
        Ok(Checkpoint {
            config: header.config,
            model,
            log: header.log,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn take(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    start
        .checked_add(len)
        .and_then(|end| bytes.get(start..end))
        .ok_or(CheckpointError::Truncated)
}

/// Bitwise equality of names, shapes and values of every parameter.
pub fn params_equal(a: &MusicDetModel, b: &MusicDetModel) -> bool {
    a.params().entries().len() == b.params().entries().len()
        && a.params().entries().iter().zip(b.params().entries()).all(|(x, y)| {
            x.name == y.name
                && x.value.shape() == y.value.shape()
                && x.value.data().iter().zip(y.value.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            channels: 2,
            frames: 2,
            bins: 2,
            n_bands: 2,
            band_steps: 1,
            global_steps: 1,
            hidden: 4,
            mu_real: 5.0,
            mu_fake: None,
        };
        let mut r = rng::seeded(5);
        let mut model = MusicDetModel::new(cfg, &mut r).unwrap();
        for e in model.params_mut().entries_mut() {
            e.value = e.value.map(|v| v + 0.1 / 3.0);
        }
        model.set_initialized(true);
        model.standardizer = Some(Standardizer {
            mean: vec![0.1, -2.0 / 7.0],
            std: vec![1.0 / 3.0, 2.5],
            count: 3,
        });
        Checkpoint {
            config: TrainConfig::default(),
            model,
            log: vec![13.9 + 1.0 / 7.0, 12.0],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(params_equal(&ck.model, &back.model));
        assert_eq!(back.model.standardizer, ck.model.standardizer);
        assert_eq!(back.log, ck.log);
        assert_eq!(back.config, ck.config);
        assert!(back.model.is_initialized());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_keys_are_sorted() {
        let bytes = sample().to_bytes();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
        assert!(json.starts_with("{\"config\":"));
        let top: Vec<&str> = ["config", "initialized", "log", "model", "standardizer", "tensors"].to_vec();
        let pos: Vec<usize> = top.iter().map(|k| json.find(&format!("\"{k}\":")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn corruption_is_classified() {
        let bytes = sample().to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));

        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&newer),
            Err(CheckpointError::VersionMismatch { found: 2 })
        ));

        for cut in [6, 12, 40, bytes.len() - 3] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Truncated)),
                "cut at {cut}"
            );
        }

        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[16..16 + len].to_vec()).unwrap();
        let renamed = json.replacen("band0.step0.actnorm.logscale", "band0.step0.actnorm.lgscale", 1);
        let mut edited = bytes[..8].to_vec();
        edited.extend_from_slice(&(renamed.len() as u64).to_le_bytes());
        edited.extend_from_slice(renamed.as_bytes());
        edited.extend_from_slice(&bytes[16 + len..]);
        assert!(matches!(
            Checkpoint::from_bytes(&edited),
            Err(CheckpointError::TensorNameMismatch { .. })
        ));

        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 8]);
        assert!(matches!(
            Checkpoint::from_bytes(&extra),
            Err(CheckpointError::TrailingBytes(8))
        ));
    }
}
