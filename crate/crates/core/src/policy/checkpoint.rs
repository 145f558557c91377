//! Checkpoint directories: `manifest.json` plus `params.bin` (little-endian
//! f32, segment order as listed in the manifest) and, when present,
//! `optimizer.bin` (little-endian f64 first moments, then second moments).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Policy, Segment, TinyLm, TinyLmConfig};
use crate::error::{Error, Result};
use crate::protocol::Vocab;

pub const CHECKPOINT_FORMAT: &str = "cotlab-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub run: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub architecture: String,
    pub hyperparameters: TinyLmConfig,
    pub vocab: Vocab,
    pub seeds: Seeds,
    pub step: usize,
    pub param_count: usize,
    pub segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer_step: Option<u64>,
}

/// Adam moments saved alongside the parameters so a resumed run continues
/// exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &TinyLm,
    seeds: Seeds,
    step: usize,
    optimizer: Option<&OptimizerSnapshot>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        architecture: "tiny_lm".into(),
        hyperparameters: model.config().clone(),
        vocab: model.vocab().clone(),
        seeds,
        step,
        param_count: model.num_params(),
        segments: model.segments(),
        optimizer_step: optimizer.map(|o| o.step),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join("manifest.json");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

    let mut bytes = Vec::with_capacity(model.num_params() * 4);
    for &p in model.params() {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    let path = dir.join("params.bin");
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;

    let opt_path = dir.join("optimizer.bin");
    if let Some(opt) = optimizer {
        let mut bytes = Vec::with_capacity((opt.m.len() + opt.v.len()) * 8);
        for &x in opt.m.iter().chain(&opt.v) {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(&opt_path, bytes).map_err(|e| Error::io(&opt_path, e))?;
    } else if opt_path.exists() {
        fs::remove_file(&opt_path).map_err(|e| Error::io(&opt_path, e))?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(TinyLm, CheckpointManifest, Option<OptimizerSnapshot>)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.architecture != "tiny_lm" {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint `{}` / `{}`",
            manifest.format, manifest.architecture
        )));
    }
    let path = dir.join("params.bin");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != manifest.param_count * 4 {
        return Err(Error::Checkpoint(format!(
            "params.bin holds {} bytes, manifest expects {} parameters",
            bytes.len(),
            manifest.param_count
        )));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let model = TinyLm::from_params(manifest.hyperparameters.clone(), manifest.vocab.clone(), params)?;
    if model.segments() != manifest.segments {
        return Err(Error::Checkpoint("segment layout does not match the architecture".into()));
    }

    let opt_path = dir.join("optimizer.bin");
    let optimizer = match manifest.optimizer_step {
        Some(step) => {
            let bytes = fs::read(&opt_path).map_err(|e| Error::io(&opt_path, e))?;
            let n = manifest.param_count;
            if bytes.len() != n * 16 {
                return Err(Error::Checkpoint("optimizer.bin has the wrong size".into()));
            }
            let vals: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Some(OptimizerSnapshot {
                step,
                m: vals[..n].to_vec(),
                v: vals[n..].to_vec(),
            })
        }
        None => None,
    };
    Ok((model, manifest, optimizer))
}
