//! Run configuration: training hyperparameters plus the component ablation
//! flags, loadable from a flat key/value TOML file whose keys mirror the
//! field names exactly.

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::fsio::sha256_hex;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Component toggles and flow depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// State style randomization.
    #[serde(default = "default_true")]
    pub ssr: bool,
    /// State flow encoding (VAE + path construction).
    #[serde(default = "default_true")]
    pub sfe: bool,
    /// State flow constraint (HJ loss).
    #[serde(default = "default_true")]
    pub sfc: bool,
    /// Per-block enablement F_1..F_4.
    #[serde(default = "default_mask")]
    pub block_mask: [bool; 4],
    /// Factorization steps.
    #[serde(rename = "T", default = "default_t")]
    pub t_steps: usize,
}

fn default_true() -> bool {
    true
}
fn default_mask() -> [bool; 4] {
    [true; 4]
}
fn default_t() -> usize {
    8
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            ssr: true,
            sfe: true,
            sfc: true,
            block_mask: [true; 4],
            t_steps: 8,
        }
    }
}

impl AblationFlags {
    /// The four cumulative rows of the component ablation.
    pub fn cumulative_rows(t_steps: usize) -> Vec<(String, AblationFlags)> {
        let mk = |ssr, sfe, sfc| AblationFlags {
            ssr,
            sfe,
            sfc,
            block_mask: [true; 4],
            t_steps,
        };
        vec![
            ("baseline".to_string(), mk(false, false, false)),
            ("ssr".to_string(), mk(true, false, false)),
            ("ssr+sfe".to_string(), mk(true, true, false)),
            ("ssr+sfe+sfc".to_string(), mk(true, true, true)),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.sfc && !self.sfe {
            return Err(Error::Config("sfc requires sfe".into()));
        }
        if self.sfe && !self.ssr {
            return Err(Error::Config("sfe requires ssr".into()));
        }
        if self.t_steps == 0 {
            return Err(Error::Config("T must be >= 1".into()));
        }
        Ok(())
    }
}

/// Training hyperparameters. Defaults are the desk-scale settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_true")]
    pub cosine_schedule: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub target_domain: String,
    /// Hooked global layer indices (1-based); empty means the last layer of
    /// each unmasked block.
    #[serde(default)]
    pub hooked_layers: Vec<usize>,
    #[serde(default = "default_lambda_recon")]
    pub lambda_recon: f64,
    #[serde(default = "default_lambda_kl")]
    pub lambda_kl: f64,
    #[serde(default = "default_batch_per_domain")]
    pub batch_per_domain: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Diffusion coefficient of the prior flow (diagnostics).
    #[serde(default = "default_diffusion")]
    pub diffusion: f64,
    #[serde(default)]
    pub backbone: BackboneConfig,
}

fn default_iterations() -> usize {
    3000
}
fn default_lr() -> f64 {
    3e-4
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_lambda_recon() -> f64 {
    1.0
}
fn default_lambda_kl() -> f64 {
    0.01
}
fn default_batch_per_domain() -> usize {
    16
}
fn default_latent_dim() -> usize {
    8
}
fn default_diffusion() -> f64 {
    0.5
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

/// Full run description: hyperparameters plus flags, flattened so the config
/// file stays a single flat key/value document. Flags serialize first so the
/// nested backbone table lands at the end, as TOML requires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub flags: AblationFlags,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("serializable config")
    }

    /// Stable hash of the canonical serialization.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml_string().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        self.train.backbone.validate()?;
        if self.train.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.train.iterations == 0 {
            return Err(Error::Config("iterations must be > 0".into()));
        }
        if self.train.batch_per_domain == 0 {
            return Err(Error::Config("batch_per_domain must be > 0".into()));
        }
        if self.train.latent_dim == 0 || self.train.latent_dim > crate::flow::MAX_EXACT_DET_DIM {
            return Err(Error::Config(format!(
                "latent_dim must be in [1, {}]",
                crate::flow::MAX_EXACT_DET_DIM
            )));
        }
        let n = self.train.backbone.num_layers();
        for &h in &self.train.hooked_layers {
            if h == 0 || h > n {
                return Err(Error::Config(format!("hooked layer {h} outside [1, {n}]")));
            }
        }
        Ok(())
    }

    /// Hook set: explicit list filtered by the block mask, or the last layer
    /// of each unmasked block.
    pub fn resolve_hooks(&self) -> Vec<usize> {
        let bb = &self.train.backbone;
        let explicit = if self.train.hooked_layers.is_empty() {
            bb.last_layer_of_blocks().to_vec()
        } else {
            let mut v = self.train.hooked_layers.clone();
            v.sort_unstable();
            v.dedup();
            v
        };
        explicit
            .into_iter()
            .filter(|&layer| {
                let (block, _) = bb.block_of_layer(layer).expect("validated hook");
                self.flags.block_mask[block]
            })
            .collect()
    }
}
