//! Checkpoint container: a JSON manifest followed by raw little-endian
//! f64 blobs keyed by parameter path.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PulseError, Result};
use crate::model::{PulseConfig, PulseModel};
use crate::optim::AdamW;

const MAGIC: &[u8; 8] = b"PULSECK1";

mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_cfg: PulseConfig,
    /// Completed optimizer steps.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Non-finite values (no validation pass yet) round-trip as null.
    #[serde(with = "nullable_f64")]
    pub val_loss: f64,
    /// Digest of the run configuration that produced this checkpoint.
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: CheckpointMeta,
    arrays: Vec<ArrayEntry>,
}

fn write_container(path: &Path, manifest: &Manifest, blob: &[f64]) -> Result<()> {
    let json = serde_json::to_vec(manifest)
        .map_err(|e| PulseError::Format(format!("manifest encode: {e}")))?;
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(json.len() as u64).to_le_bytes())?;
    f.write_all(&json)?;
    let mut bytes = Vec::with_capacity(blob.len() * 8);
    for v in blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Manifest, Vec<f64>)> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(PulseError::Format(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let mut json = vec![0u8; u64::from_le_bytes(len_bytes) as usize];
    f.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)
        .map_err(|e| PulseError::Format(format!("manifest decode: {e}")))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(PulseError::Format("truncated checkpoint blob".into()));
    }
    let blob: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((manifest, blob))
}

/// Serialize model parameters (and optimizer moments, when given) with
/// run metadata.
pub fn save(
    path: &Path,
    model: &PulseModel,
    optimizer: Option<&AdamW>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut arrays = Vec::new();
    let mut blob = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f64], blob: &mut Vec<f64>| {
        arrays.push(ArrayEntry {
            name,
            shape,
            offset: blob.len(),
            len: data.len(),
        });
        blob.extend_from_slice(data);
    };
    let params = model.params();
    for (name, t) in &params {
        push(format!("param/{name}"), t.shape().to_vec(), &t.data(), &mut blob);
    }
    if let Some(opt) = optimizer {
        for (i, (name, t)) in params.iter().enumerate() {
            push(format!("adam_m/{name}"), t.shape().to_vec(), &opt.m[i], &mut blob);
            push(format!("adam_v/{name}"), t.shape().to_vec(), &opt.v[i], &mut blob);
        }
        push("adam_step".into(), vec![1], &[opt.step_count as f64], &mut blob);
    }
    write_container(
        path,
        &Manifest {
            meta: meta.clone(),
            arrays,
        },
        &blob,
    )
}

/// Restore a model (and optionally optimizer moments) from a checkpoint.
pub fn load(path: &Path) -> Result<(PulseModel, Option<AdamW>, CheckpointMeta)> {
    let (manifest, blob) = read_container(path)?;
    let model = PulseModel::new(manifest.meta.model_cfg.clone())?;
    let lookup = |name: &str| -> Result<&[f64]> {
        let e = manifest
            .arrays
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| PulseError::Format(format!("checkpoint missing array {name}")))?;
        blob.get(e.offset..e.offset + e.len)
            .ok_or_else(|| PulseError::Format(format!("checkpoint blob truncated at {name}")))
    };
    let params = model.params();
    for (name, t) in &params {
        let data = lookup(&format!("param/{name}"))?;
        if data.len() != t.len() {
            return Err(PulseError::Format(format!(
                "checkpoint array param/{name} has {} values, expected {}",
                data.len(),
                t.len()
            )));
        }
        t.set_data(data);
    }
    let has_moments = manifest.arrays.iter().any(|e| e.name == "adam_step");
    let optimizer = if has_moments {
        let mut opt = AdamW::new(&params, 0.0);
        for (i, (name, _)) in params.iter().enumerate() {
            opt.m[i] = lookup(&format!("adam_m/{name}"))?.to_vec();
            opt.v[i] = lookup(&format!("adam_v/{name}"))?.to_vec();
        }
        opt.step_count = lookup("adam_step")?[0] as u64;
        Some(opt)
    } else {
        None
    };
    Ok((model, optimizer, manifest.meta))
}
