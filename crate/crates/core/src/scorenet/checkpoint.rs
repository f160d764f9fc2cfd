//! Checkpoint container: magic line, length-prefixed JSON manifest, then raw
//! little-endian `f64` parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mlp::Architecture;
use super::model::{ModelKind, ScoreModel};
use crate::diffusion::schedule::Schedule;
use crate::error::{Error, Result};
use crate::manifolds::ManifoldSpec;

const MAGIC: &[u8] = b"MMHCKPT1\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub kind: ModelKind,
    pub ambient_dim: usize,
    pub cond_dim: usize,
    pub schedule: Schedule,
    pub schedule_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Architecture>,
    pub seed: u64,
    pub steps: usize,
    pub param_count: usize,
    /// SHA-256 of the parameter bytes, hex encoded.
    pub params_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<ManifoldSpec>,
}

fn param_bytes(params: &[f64]) -> Vec<u8> {
    params.iter().flat_map(|p| p.to_le_bytes()).collect()
}

/// SHA-256 (hex) of a parameter vector's little-endian bytes.
pub fn params_hash(params: &[f64]) -> String {
    hex::encode(Sha256::digest(param_bytes(params)))
}

/// Serializes a model into checkpoint bytes.
pub fn encode_checkpoint(model: &ScoreModel) -> Result<Vec<u8>> {
    let (arch, params, seed, steps, spec) = match model {
        ScoreModel::Trained(m) => (Some(m.arch.clone()), m.params.clone(), m.seed, m.steps, None),
        ScoreModel::Analytic(a) => (None, Vec::new(), 0, 0, Some(a.spec.clone())),
    };
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        kind: model.kind(),
        ambient_dim: model.ambient_dim(),
        cond_dim: model.cond_dim(),
        schedule: *model.schedule(),
        schedule_id: model.schedule().id(),
        architecture: arch,
        seed,
        steps,
        param_count: params.len(),
        params_sha256: params_hash(&params),
        spec,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend(param_bytes(&params));
    Ok(out)
}

/// Parses checkpoint bytes, verifying the parameter hash.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointManifest, ScoreModel)> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| corrupt("bad magic"))?;
    if rest.len() < 8 {
        return Err(corrupt("truncated header"));
    }
    let (len, rest) = rest.split_at(8);
    let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
    if rest.len() < len {
        return Err(corrupt("truncated manifest"));
    }
    let (json, payload) = rest.split_at(len);
    let manifest: CheckpointManifest = serde_json::from_slice(json).map_err(|e| corrupt(&format!("manifest: {e}")))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported version {}", manifest.version)));
    }
    if payload.len() != 8 * manifest.param_count {
        return Err(corrupt(&format!(
            "expected {} parameter bytes, found {}",
            8 * manifest.param_count,
            payload.len()
        )));
    }
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if params_hash(&params) != manifest.params_sha256 {
        return Err(corrupt("parameter hash mismatch"));
    }
    if manifest.schedule.id() != manifest.schedule_id {
        return Err(corrupt("schedule id does not match schedule"));
    }
    let model = match manifest.kind {
        ModelKind::Trained => {
            let arch = manifest
                .architecture
                .clone()
                .ok_or_else(|| corrupt("trained checkpoint without architecture"))?;
            if arch.ambient_dim != manifest.ambient_dim || arch.cond_dim != manifest.cond_dim {
                return Err(corrupt("architecture dims disagree with manifest"));
            }
            ScoreModel::trained(arch, params, manifest.schedule, manifest.seed, manifest.steps)
                .map_err(|e| corrupt(&e.to_string()))?
        }
        ModelKind::Analytic => {
            let spec = manifest
                .spec
                .clone()
                .ok_or_else(|| corrupt("analytic checkpoint without spec"))?;
            ScoreModel::analytic(spec, manifest.schedule, manifest.cond_dim > 0).map_err(|e| corrupt(&e.to_string()))?
        }
    };
    if model.ambient_dim() != manifest.ambient_dim || model.cond_dim() != manifest.cond_dim {
        return Err(corrupt("model dims disagree with manifest"));
    }
    Ok((manifest, model))
}

pub fn save_checkpoint(model: &ScoreModel, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ScoreModel> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?.1)
}

/// Loads a checkpoint and checks it against the dimensions a config expects.
pub fn load_checkpoint_checked(path: &Path, ambient_dim: usize, cond_dim: Option<usize>) -> Result<ScoreModel> {
    let model = load_checkpoint(path)?;
    if model.ambient_dim() != ambient_dim {
        return Err(Error::DimensionMismatch {
            expected: ambient_dim,
            got: model.ambient_dim(),
        });
    }
    if let Some(c) = cond_dim.filter(|&c| c != model.cond_dim()) {
        return Err(Error::DimensionMismatch {
            expected: c,
            got: model.cond_dim(),
        });
    }
    Ok(model)
}
