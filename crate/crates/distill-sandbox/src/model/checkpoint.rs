//! Checkpoint archive: exact f64 bits for parameters and, optionally, the
//! optimizer moments, guarded by a trailing content hash. Loading a
//! checkpoint and saving it again produces identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::{Layout, ModelConfig, ModelParams, OptimizerState};

const MAGIC: &[u8; 4] = b"MTCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
    pub step: u64,
    pub samples_seen: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    samples_seen: u64,
    optimizer: Option<OptHeader>,
}

#[derive(Serialize, Deserialize)]
struct OptHeader {
    step: u64,
    base_lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

fn push_f64s(bytes: &mut Vec<u8>, data: &[f64]) {
    bytes.reserve(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8], n: usize) -> Vec<f64> {
    bytes[..n * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    optimizer: Option<&OptimizerState>,
    step: u64,
    samples_seen: u64,
) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: params.config,
        step,
        samples_seen,
        optimizer: optimizer.map(|o| OptHeader {
            step: o.step,
            base_lr: o.base_lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        }),
    })?;
    let mut bytes = Vec::with_capacity(64 + header.len() + params.data.len() * 24);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    push_f64s(&mut bytes, &params.data);
    if let Some(o) = optimizer {
        push_f64s(&mut bytes, &o.m);
        push_f64s(&mut bytes, &o.v);
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |detail: &str| Error::Format { path: path.to_path_buf(), detail: detail.into() };
    if bytes.len() < 48 || &bytes[..4] != MAGIC {
        return Err(fmt("missing MTCK magic"));
    }
    let (payload, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            detail: "content hash mismatch".into(),
        });
    }
    let version = u32::from_le_bytes(payload[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fmt(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(payload[8..16].try_into().unwrap()) as usize;
    if payload.len() < 16 + header_len {
        return Err(fmt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&payload[16..16 + header_len])?;
    header.config.validate()?;
    let layout = Layout::new(&header.config);
    let body = &payload[16 + header_len..];
    let expected = layout.total * 8 * if header.optimizer.is_some() { 3 } else { 1 };
    if body.len() != expected {
        return Err(fmt(&format!("tensor payload {} bytes, expected {expected}", body.len())));
    }
    let data = read_f64s(body, layout.total);
    let params = ModelParams { config: header.config, layout: layout.clone(), data };
    let optimizer = header.optimizer.map(|o| {
        let m = read_f64s(&body[layout.total * 8..], layout.total);
        let v = read_f64s(&body[layout.total * 16..], layout.total);
        OptimizerState {
            step: o.step,
            base_lr: o.base_lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            m,
            v,
        }
    });
    Ok(Checkpoint { params, optimizer, step: header.step, samples_seen: header.samples_seen })
}
