//! Versioned binary checkpoint: JSON header with named tensor index,
//! little-endian f64 payload, SHA-256 trailer.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::Model;

const MAGIC: &[u8; 8] = b"MOCECKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 units.
    offset: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Serialize a model to the checkpoint byte format.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    let mut failure = None;
    model.visit_params(&mut |name, t| {
        if failure.is_none() {
            if let Err(e) = t.validate_finite(&name) {
                failure = Some(e);
                return;
            }
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            count: t.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    });
    if let Some(e) = failure {
        return Err(e);
    }

    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        tensors,
    })?;

    let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Rebuild a model from checkpoint bytes.
///
/// The checksum and config invariants are validated before any weight is
/// accepted.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    if &body[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    if body.len() < 20 + header_len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[20..20 + header_len])?;
    header.config.validate()?;

    let payload = &body[20 + header_len..];
    let mut model = Model::new(header.config, 0)?;

    // Match stored tensors against the skeleton by name and shape.
    let mut expected = Vec::new();
    model.visit_params(&mut |name, t| expected.push((name, t.shape().to_vec())));
    if expected.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(header.tensors.len());
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor mismatch: stored {} {:?}, expected {} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
        let start = entry.offset * 8;
        let end = start + entry.count * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} overruns payload",
                entry.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!(
                "tensor {} holds non-finite values",
                entry.name
            )));
        }
        values.push(data);
    }
    let mut it = values.into_iter();
    model.visit_params_mut(&mut |t| {
        let data = it.next().expect("tensor counts already matched");
        t.data_mut().copy_from_slice(&data);
    });
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

/// Hex SHA-256 of the model's checkpoint serialization.
///
/// Interventions must leave this hash unchanged: they reallocate experts,
/// never parameters.
pub fn content_hash(model: &Model) -> Result<String> {
    let bytes = to_bytes(model)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Hex SHA-256 of arbitrary bytes (used for manifests).
pub fn hash_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
