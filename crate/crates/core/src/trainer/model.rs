//! Assembly of the full trainable system: backbone, per-hook VAEs, and
//! per-block potential pairs, all registered in one parameter store.

use super::config::RunConfig;
use crate::backbone::Backbone;
use crate::error::Result;
use crate::flow::PotentialPair;
use crate::nn::ParamStore;
use crate::rng;
use crate::scalar::{s, Scalar};
use crate::vae::VaePerHook;
use std::collections::BTreeMap;

/// Hidden widths of the potential MLPs.
pub const POTENTIAL_HIDDEN: [usize; 2] = [64, 64];

pub struct DgModel<S> {
    pub ps: ParamStore<S>,
    pub backbone: Backbone<S>,
    /// Sorted 1-based global layer indices with hooks.
    pub hooks: Vec<usize>,
    /// One VAE per hooked layer.
    pub vaes: BTreeMap<usize, VaePerHook>,
    /// One potential pair per block that carries at least one hook.
    pub potentials: BTreeMap<usize, PotentialPair>,
    pub latent_dim: usize,
}

impl<S: Scalar> DgModel<S> {
    /// Deterministic initialization from the config seed.
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut init_rng = rng::stream(cfg.train.seed, "init");
        let backbone = Backbone::init(&mut ps, &cfg.train.backbone, &mut init_rng)?;
        let hooks = cfg.resolve_hooks();
        let mut vaes = BTreeMap::new();
        let mut potentials = BTreeMap::new();
        if cfg.flags.sfe {
            for &layer in &hooks {
                let (block, _) = cfg.train.backbone.block_of_layer(layer).expect("hook");
                let side = cfg.train.backbone.block_side(block);
                let channels = cfg.train.backbone.channels_per_block[block];
                vaes.insert(
                    layer,
                    VaePerHook::init(
                        &mut ps,
                        &format!("vae.layer{layer}"),
                        (channels, side, side),
                        cfg.train.latent_dim,
                        &mut init_rng,
                    ),
                );
                potentials.entry(block).or_insert_with(|| {
                    PotentialPair::init(
                        &mut ps,
                        &format!("flow.block{block}"),
                        cfg.train.latent_dim,
                        &POTENTIAL_HIDDEN,
                        s(0.1),
                        &mut init_rng,
                    )
                });
            }
        }
        Ok(DgModel {
            ps,
            backbone,
            hooks,
            vaes,
            potentials,
            latent_dim: cfg.train.latent_dim,
        })
    }
}
