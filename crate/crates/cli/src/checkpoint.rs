//! Binary checkpoints.
//!
//! Layout: the ASCII magic `COVAE1`, a little-endian `u32` header length, a
//! JSON header, then every live parameter tensor followed by every EMA
//! tensor as little-endian `f32`, in header order.

use std::fs;
use std::path::Path;

use covae_core::model::{EmaState, ModelBundle, Params};
use covae_core::numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const MAGIC: &[u8; 6] = b"COVAE1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data_dim: usize,
    iteration: u64,
    ema_rate: f64,
    config_hash: String,
    config: RunConfig,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Training iterations completed.
    pub iteration: u64,
    pub bundle: ModelBundle,
}

/// Rounds every parameter to single precision, as stored on disk.
pub fn quantize(bundle: &ModelBundle) -> ModelBundle {
    let round = |p: &Params| Params {
        tensors: p
            .tensors
            .iter()
            .map(|t| t.map(|v| v as f32 as f64))
            .collect(),
    };
    let mut out = bundle.clone();
    out.params = round(&bundle.params);
    out.ema.shadow = round(&bundle.ema.shadow);
    out
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let layout = self.bundle.spec.layout();
        let header = Header {
            names: layout.iter().map(|(n, _)| n.clone()).collect(),
            shapes: layout.iter().map(|(_, s)| s.clone()).collect(),
            data_dim: self.bundle.spec.data_dim,
            iteration: self.iteration,
            ema_rate: self.bundle.ema.rate,
            config_hash: self.config.hash(),
            config: self.config.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let n_params = self.bundle.params.count();
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + 8 * n_params);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in [&self.bundle.params, &self.bundle.ema.shadow] {
            for t in &p.tensors {
                for &v in t.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, CliError> {
        let corrupt = |reason: String| CliError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let mut len = [0u8; 4];
        len.copy_from_slice(&bytes[6..10]);
        let header_len = u32::from_le_bytes(len) as usize;
        let body = &bytes[10..];
        if body.len() < header_len {
            return Err(corrupt(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            )));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| corrupt(format!("header: {e}")))?;
        let hash = header.config.hash();
        if hash != header.config_hash {
            return Err(corrupt(format!(
                "config hash {} does not match stored {}",
                hash, header.config_hash
            )));
        }
        header
            .config
            .validate()
            .map_err(|e| corrupt(format!("stored config: {e}")))?;
        if header.names.len() != header.shapes.len() {
            return Err(corrupt("names and shapes differ in length".into()));
        }
        let spec = header.config.model_spec(header.data_dim);
        let layout = spec.layout();
        let stored: Vec<(String, Vec<usize>)> = header
            .names
            .iter()
            .cloned()
            .zip(header.shapes.iter().cloned())
            .collect();
        if stored != layout {
            return Err(corrupt("tensor layout does not match the stored config".into()));
        }
        let count: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let payload = &body[header_len..];
        if payload.len() != 2 * 4 * count {
            return Err(corrupt(format!(
                "payload is {} bytes, header implies {}",
                payload.len(),
                8 * count
            )));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
        let mut read = || -> Result<Params, CliError> {
            let tensors = layout
                .iter()
                .map(|(_, shape)| {
                    let n = shape.iter().product();
                    let data: Vec<f64> = values.by_ref().take(n).collect();
                    Tensor::new(shape.clone(), data).map_err(|e| corrupt(e.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Params { tensors })
        };
        let params = read()?;
        let shadow = read()?;
        let ema = EmaState {
            shadow,
            rate: header.ema_rate,
        };
        let bundle = ModelBundle::from_parts(spec, params, ema).map_err(|e| corrupt(e.to_string()))?;
        Ok(Self {
            config: header.config,
            iteration: header.iteration,
            bundle,
        })
    }

    /// Writes through a temporary file so an existing checkpoint survives a
    /// failed write.
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
