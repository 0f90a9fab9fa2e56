//! Checkpoint persistence: a single binary blob (embedded config + all
//! parameters) plus a JSON sidecar carrying the config hash, iteration, and
//! seed.

use super::config::RunConfig;
use super::model::DgModel;
use crate::error::{Error, Result};
use crate::fsio::atomic_write;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"DGCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Sidecar {
    pub config_hash: String,
    pub iteration: usize,
    pub seed: u64,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut os = checkpoint.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Writes `<path>` (blob) and `<path>.json` (sidecar) atomically.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &DgModel<S>,
    cfg: &RunConfig,
    iteration: usize,
) -> Result<()> {
    let cfg_toml = cfg.to_toml_string();
    let params = model.ps.to_bytes();
    let mut blob = Vec::with_capacity(cfg_toml.len() + params.len() + 32);
    blob.extend_from_slice(MAGIC);
    blob.extend_from_slice(&VERSION.to_le_bytes());
    blob.extend_from_slice(&(cfg_toml.len() as u64).to_le_bytes());
    blob.extend_from_slice(cfg_toml.as_bytes());
    blob.extend_from_slice(&params);
    atomic_write(path, &blob)?;
    let sidecar = Sidecar {
        config_hash: cfg.hash(),
        iteration,
        seed: cfg.train.seed,
    };
    atomic_write(
        &sidecar_path(path),
        &serde_json::to_vec_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Rebuilds the model from the embedded config and loads its parameters.
/// Verifies the sidecar hash when the sidecar is present.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(DgModel<S>, RunConfig, Sidecar)> {
    let blob = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    if blob.len() < 16 || &blob[0..4] != MAGIC {
        return Err(Error::Data("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(blob[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = u64::from_le_bytes(blob[8..16].try_into().unwrap()) as usize;
    if blob.len() < 16 + cfg_len {
        return Err(Error::Data("truncated checkpoint".into()));
    }
    let cfg_toml = std::str::from_utf8(&blob[16..16 + cfg_len])
        .map_err(|_| Error::Data("bad utf8 in checkpoint config".into()))?;
    let cfg = RunConfig::from_toml_str(cfg_toml)?;
    let mut model = DgModel::<S>::build(&cfg)?;
    model.ps.load_bytes(&blob[16 + cfg_len..])?;
    let sidecar_file = sidecar_path(path);
    let sidecar: Sidecar = if sidecar_file.exists() {
        let sc: Sidecar = serde_json::from_slice(&std::fs::read(&sidecar_file)?)?;
        if sc.config_hash != cfg.hash() {
            return Err(Error::Data(
                "sidecar config hash does not match embedded config".into(),
            ));
        }
        sc
    } else {
        Sidecar {
            config_hash: cfg.hash(),
            iteration: 0,
            seed: cfg.train.seed,
        }
    };
    Ok((model, cfg, sidecar))
}
