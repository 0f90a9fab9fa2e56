//! The training pipeline: per-iteration forward with style injection and
//! flow branches at hooked layers, a hand-chained backward over the whole
//! system, the optimizer loop, and evaluation.
//!
//! Classification trains on two views of every batch: the natural stream and
//! a fully stylized stream (stylization probability 1 at every hooked layer).
//! Averaging the two cross-entropies keeps evaluation-time statistics inside
//! the training distribution while the randomized view supplies the style
//! augmentation. The flow branches always pair the natural feature with its
//! stylized counterpart.

use super::config::RunConfig;
use super::loss::{total_loss, LossParts, VaeTerms};
use super::model::DgModel;
use crate::backbone::layer::VssCache;
use crate::backbone::HeadCache;
use crate::data::{BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::hj::{flow_branch_backward, flow_branch_forward, FlowBranch, HjLossTerms};
use crate::nn::{cosine_lr, cross_entropy, AdamW};
use crate::rng;
use crate::scalar::{s, Scalar};
use crate::style::{compute_style_stats, sample_style_batch, stylize, stylize_backward, StyleStats};
use crate::vae::{mse_loss, DecodeCache, GaussBatch, TrunkCache};
use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

/// Blocks whose hooked outputs are replaced by their stylized version in the
/// augmented stream. The final block stays branch-only: its maps collapse to
/// 1x1 at desk scale, where restylization erases the content entirely.
pub const STYLE_STREAM_BLOCKS: usize = 3;

/// Flow-branch state of one hooked layer during one iteration.
struct VaeBranchState<S> {
    gauss_orig: GaussBatch<S>,
    trunk_f: TrunkCache<S>,
    xi0: Array2<S>,
    gauss_cond: GaussBatch<S>,
    trunk_ft: TrunkCache<S>,
    joined: Array2<S>,
    xi_c: Array2<S>,
    dec_cache: DecodeCache<S>,
    drecon: Array4<S>,
    kl_grads: (Array2<S>, Array2<S>, Array2<S>, Array2<S>),
    flow: FlowBranch<S>,
    block: usize,
}

/// Hook record on the natural stream: the original feature, its stylized
/// hallucination, and the flow branch built on the pair.
struct HookState<S> {
    layer: usize,
    f: Array4<S>,
    stats: StyleStats<S>,
    target: StyleStats<S>,
    ssr_applied: bool,
    vae: Option<VaeBranchState<S>>,
}

/// Hook record on the augmented stream (classification view only).
struct AugHookState<S> {
    f: Array4<S>,
    stats: StyleStats<S>,
    target: StyleStats<S>,
    stream_replaced: bool,
}

/// One backbone traversal with everything its backward needs.
struct Chain<S> {
    stem_rows: Array2<S>,
    /// (block, layer cache, optional hook index) in forward order.
    layers: Vec<(usize, VssCache<S>, Option<usize>)>,
    merges: Vec<Array2<S>>,
    head: HeadCache<S>,
    logits: Array2<S>,
    dlogits: Array2<S>,
}

/// Everything the backward pass needs from one training forward.
pub struct ForwardPass<S> {
    natural: Chain<S>,
    aug: Option<Chain<S>>,
    hooks: Vec<HookState<S>>,
    aug_hooks: Vec<AugHookState<S>>,
    /// Natural-view logits (the evaluation-consistent ones).
    pub logits: Array2<S>,
    pub parts: LossParts<S>,
    pub hj_terms: Vec<HjLossTerms<S>>,
    pub vae_terms: VaeTerms<S>,
}

impl<S: Scalar> ForwardPass<S> {
    /// Removes the classification upstream (both views); used to isolate the
    /// auxiliary-loss gradient paths.
    pub fn zero_classification_grads(&mut self) {
        self.natural.dlogits.fill(S::zero());
        if let Some(aug) = &mut self.aug {
            aug.dlogits.fill(S::zero());
        }
    }
}

/// Walks the backbone once. `stylize_stream` substitutes the stylized output
/// into the stream at hooks of early blocks; `on_hook` builds per-hook state
/// and may consume the (natural, stylized) pair.
fn run_chain<S: Scalar>(
    model: &DgModel<S>,
    images: &Array4<S>,
    labels: &[usize],
    ce_weight: S,
    mut on_hook: impl FnMut(usize, usize, &Array4<S>) -> Result<(Option<Array4<S>>, usize)>,
) -> Result<Chain<S>> {
    let ps = &model.ps;
    let stem_rows = model.backbone.stem.gather(images);
    let mut x = model.backbone.stem.forward(ps, images).0;
    let mut layers = Vec::new();
    let mut merges = Vec::new();
    let mut global = 0usize;
    for b in 0..4 {
        for layer in &model.backbone.blocks[b] {
            let (y, cache) = layer.forward(ps, &x);
            global += 1;
            if model.hooks.contains(&global) {
                let (replacement, hook_idx) = on_hook(b, global, &y)?;
                x = replacement.unwrap_or(y);
                layers.push((b, cache, Some(hook_idx)));
            } else {
                x = y;
                layers.push((b, cache, None));
            }
        }
        if b < 3 {
            let (y, rows) = model.backbone.merges[b].forward(ps, &x);
            merges.push(rows);
            x = y;
        }
    }
    let (logits, head) = model.backbone.head_forward(ps, &x);
    let (_, mut dlogits) = cross_entropy(&logits, labels);
    dlogits.mapv_inplace(|v| v * ce_weight);
    Ok(Chain {
        stem_rows,
        layers,
        merges,
        head,
        logits,
        dlogits,
    })
}

/// Training forward over one batch.
pub fn forward_train<S: Scalar>(
    model: &DgModel<S>,
    cfg: &RunConfig,
    images: &Array4<S>,
    labels: &[usize],
    style_rng: &mut ChaCha8Rng,
    noise_rng: &mut ChaCha8Rng,
) -> Result<ForwardPass<S>> {
    let flags = &cfg.flags;
    let ps = &model.ps;
    let batch = images.dim().0;
    let n_hooks = model.hooks.len().max(1);

    // one style draw per hook, shared by the branch pair and the augmented view
    let mut targets: std::collections::BTreeMap<usize, StyleStats<S>> = Default::default();
    if flags.ssr {
        for &layer in &model.hooks {
            let (block, _) = cfg.train.backbone.block_of_layer(layer).expect("hook");
            let channels = cfg.train.backbone.channels_per_block[block];
            targets.insert(layer, sample_style_batch::<S, _>(batch, channels, style_rng));
        }
    }

    let mut hooks: Vec<HookState<S>> = Vec::new();
    let mut hj_terms = Vec::new();
    let mut recon_sum = S::zero();
    let mut kl_sum = S::zero();
    let ce_weight = if flags.ssr { s::<S>(0.5) } else { S::one() };

    // natural view: the stream is never replaced; hooks build the flow pair
    let natural = run_chain(model, images, labels, ce_weight, |b, layer, y| {
        let f = y.clone();
        let stats = compute_style_stats(&f);
        let target = if flags.ssr {
            targets.get(&layer).expect("style drawn").clone()
        } else {
            stats.clone()
        };
        let f_styl = if flags.ssr {
            stylize(&f, &stats, &target)
        } else {
            f.clone()
        };
        let vae = if flags.sfe {
            let vae = model.vaes.get(&layer).expect("hook has a vae");
            let pair = model.potentials.get(&b).expect("block potentials");
            let (gauss_orig, trunk_f) = vae.encode(ps, &f);
            let (z0, xi0) = gauss_orig.sample(noise_rng);
            let (gauss_cond, trunk_ft, joined) = vae.encode_cond(ps, &f_styl, &z0);
            let (z_t0, xi_c) = gauss_cond.sample(noise_rng);
            let (recon_map, dec_cache) = vae.decode(ps, &z0);
            let (recon, drecon) = mse_loss(&recon_map, &f);
            let (kl_o, dmo, dlo) = gauss_orig.kl_to_standard();
            let (kl_c, dmc, dlc) = gauss_cond.kl_to_standard();
            let flow = flow_branch_forward(ps, &pair.u_net, &pair.force_net, &z_t0, flags.t_steps)?;
            recon_sum += recon;
            kl_sum += (kl_o + kl_c) * s::<S>(0.5);
            if flags.sfc {
                hj_terms.push(flow.terms);
            }
            Some(VaeBranchState {
                gauss_orig,
                trunk_f,
                xi0,
                gauss_cond,
                trunk_ft,
                joined,
                xi_c,
                dec_cache,
                drecon,
                kl_grads: (dmo, dlo, dmc, dlc),
                flow,
                block: b,
            })
        } else {
            None
        };
        let idx = hooks.len();
        hooks.push(HookState {
            layer,
            f,
            stats,
            target,
            ssr_applied: flags.ssr,
            vae,
        });
        Ok((None, idx))
    })?;

    // augmented view: stylization replaces the stream at early-block hooks
    let mut aug_hooks: Vec<AugHookState<S>> = Vec::new();
    let aug = if flags.ssr {
        Some(run_chain(model, images, labels, ce_weight, |b, layer, y| {
            let stream_replaced = b < STYLE_STREAM_BLOCKS;
            let f = y.clone();
            let stats = compute_style_stats(&f);
            let target = targets.get(&layer).expect("style drawn").clone();
            let replacement = if stream_replaced {
                Some(stylize(&f, &stats, &target))
            } else {
                None
            };
            let idx = aug_hooks.len();
            aug_hooks.push(AugHookState {
                f,
                stats,
                target,
                stream_replaced,
            });
            Ok((replacement, idx))
        })?)
    } else {
        None
    };

    let ce = {
        let (ce_a, _) = cross_entropy(&natural.logits, labels);
        match &aug {
            Some(chain) => {
                let (ce_b, _) = cross_entropy(&chain.logits, labels);
                (ce_a + ce_b) * s::<S>(0.5)
            }
            None => ce_a,
        }
    };
    let vae_terms = if flags.sfe {
        let inv = S::one() / s::<S>(n_hooks as f64);
        VaeTerms {
            recon: recon_sum * inv,
            kl: kl_sum * inv,
        }
    } else {
        VaeTerms::zero()
    };
    let hj_total: S = hj_terms.iter().map(|t| t.total).sum();
    let total = ce
        + hj_total
        + s::<S>(cfg.train.lambda_recon) * vae_terms.recon
        + s::<S>(cfg.train.lambda_kl) * vae_terms.kl;
    let parts = LossParts {
        ce,
        hj: hj_total,
        recon: vae_terms.recon,
        kl: vae_terms.kl,
        total,
    };
    let logits = natural.logits.clone();
    Ok(ForwardPass {
        natural,
        aug,
        hooks,
        aug_hooks,
        logits,
        parts,
        hj_terms,
        vae_terms,
    })
}

/// Backward over the entire system; accumulates every parameter gradient.
pub fn backward_train<S: Scalar>(model: &mut DgModel<S>, cfg: &RunConfig, pass: &ForwardPass<S>) {
    let DgModel {
        ps,
        backbone,
        vaes,
        potentials,
        ..
    } = model;
    let flags = &cfg.flags;
    let n_hooks = pass.hooks.len().max(1);
    let lambda_recon = s::<S>(cfg.train.lambda_recon) / s::<S>(n_hooks as f64);
    let lambda_kl_half = s::<S>(cfg.train.lambda_kl) * s::<S>(0.5) / s::<S>(n_hooks as f64);

    // augmented view: classification gradient through the stylized stream
    if let Some(aug) = &pass.aug {
        let mut d = backbone.head_backward(ps, &aug.head, &aug.dlogits);
        let mut li = aug.layers.len();
        for b in (0..4).rev() {
            if b < 3 {
                d = backbone.merges[b].backward(ps, &aug.merges[b], &d);
            }
            for j in (0..backbone.blocks[b].len()).rev() {
                li -= 1;
                let (_, cache, hook_idx) = &aug.layers[li];
                if let Some(hi) = hook_idx {
                    let hook = &pass.aug_hooks[*hi];
                    if hook.stream_replaced {
                        d = stylize_backward(&hook.f, &hook.stats, &hook.target, &d);
                    }
                }
                d = backbone.blocks[b][j].backward(ps, cache, &d);
            }
        }
        let _ = backbone.stem.backward(ps, &aug.stem_rows, &d);
    }

    // natural view: classification plus every branch gradient
    let mut d = backbone.head_backward(ps, &pass.natural.head, &pass.natural.dlogits);
    let mut li = pass.natural.layers.len();
    for b in (0..4).rev() {
        if b < 3 {
            d = backbone.merges[b].backward(ps, &pass.natural.merges[b], &d);
        }
        for j in (0..backbone.blocks[b].len()).rev() {
            li -= 1;
            let (_, cache, hook_idx) = &pass.natural.layers[li];
            if let Some(hi) = hook_idx {
                let hook = &pass.hooks[*hi];
                let batch = hook.f.dim().0;
                let mut df = std::mem::replace(&mut d, Array4::zeros(hook.f.dim()));
                let mut df_styl = Array4::zeros(hook.f.dim());
                if let Some(vb) = &hook.vae {
                    let vae = vaes.get(&hook.layer).expect("hook vae");
                    let pair = potentials.get(&vb.block).expect("block potentials");
                    // flow constraint -> z~0
                    let mut dz_t0 = Array2::zeros((batch, vb.gauss_cond.mean.dim().1));
                    if flags.sfc {
                        dz_t0 += &flow_branch_backward(
                            ps,
                            &pair.u_net,
                            &pair.force_net,
                            &vb.flow,
                            S::one(),
                        );
                    }
                    // conditional head: reparameterization plus KL
                    let (mut dmean_c, mut dlv_c) = vb.gauss_cond.reparam_backward(&vb.xi_c, &dz_t0);
                    dmean_c.zip_mut_with(&vb.kl_grads.2, |a, g| *a += lambda_kl_half * *g);
                    dlv_c.zip_mut_with(&vb.kl_grads.3, |a, g| *a += lambda_kl_half * *g);
                    let (dflat_ft, dz0_cond) =
                        vae.encode_cond_backward(ps, &vb.joined, &vb.gauss_cond, &dmean_c, &dlv_c);
                    df_styl += &vae.trunk_backward(ps, &vb.trunk_ft, &dflat_ft);
                    // reconstruction trains the decoder on (z0, f) pairs;
                    // the encoder is shaped by the KL and HJ terms. Routing
                    // recon gradients into the encoder measurably collapses
                    // the backbone representation at this scale.
                    let drecon_scaled = vb.drecon.mapv(|v| v * lambda_recon);
                    let _ = vae.decode_backward(ps, &vb.dec_cache, &drecon_scaled);
                    let dz0 = dz0_cond;
                    let (mut dmean_o, mut dlv_o) = vb.gauss_orig.reparam_backward(&vb.xi0, &dz0);
                    dmean_o.zip_mut_with(&vb.kl_grads.0, |a, g| *a += lambda_kl_half * *g);
                    dlv_o.zip_mut_with(&vb.kl_grads.1, |a, g| *a += lambda_kl_half * *g);
                    let dflat_f =
                        vae.encode_backward(ps, &vb.trunk_f, &vb.gauss_orig, &dmean_o, &dlv_o);
                    df += &vae.trunk_backward(ps, &vb.trunk_f, &dflat_f);
                }
                if hook.ssr_applied {
                    df += &stylize_backward(&hook.f, &hook.stats, &hook.target, &df_styl);
                } else {
                    df += &df_styl;
                }
                d = backbone.blocks[b][j].backward(ps, cache, &df);
            } else {
                d = backbone.blocks[b][j].backward(ps, cache, &d);
            }
        }
    }
    let _ = backbone.stem.backward(ps, &pass.natural.stem_rows, &d);
}

/// One log row per iteration.
#[derive(Debug, Clone, serde::Serialize)]
pub struct IterLog {
    pub iter: usize,
    pub lr: f64,
    pub ce: f64,
    pub hj: f64,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

pub struct TrainOutcome<S> {
    pub model: DgModel<S>,
    pub log: Vec<IterLog>,
    pub config: RunConfig,
}

/// Rejects non-finite loss components with a diagnostic naming the term.
pub fn check_finite_parts<S: Scalar>(iteration: usize, parts: &LossParts<S>) -> Result<()> {
    let named = [
        ("ce", parts.ce),
        ("hj", parts.hj),
        ("recon", parts.recon),
        ("kl", parts.kl),
        ("total", parts.total),
    ];
    for (term, value) in named {
        if !value.is_finite() {
            return Err(Error::NumericAbort {
                iteration,
                term: term.into(),
                value: value.as_f64(),
            });
        }
    }
    Ok(())
}

/// Full training run on the leave-one-domain-out split defined by
/// `cfg.train.target_domain`.
pub fn train_run<S: Scalar>(cfg: &RunConfig, dataset: &Dataset<S>) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let all = dataset.domains();
    if !all.iter().any(|d| *d == cfg.train.target_domain) {
        return Err(Error::Domain(format!(
            "target domain '{}' not in dataset; available: {}",
            cfg.train.target_domain,
            all.join(", ")
        )));
    }
    let sources: Vec<String> = all
        .iter()
        .filter(|d| **d != cfg.train.target_domain)
        .cloned()
        .collect();
    if sources.is_empty() {
        return Err(Error::Config("no source domains left after holdout".into()));
    }
    let mut model = DgModel::build(cfg)?;
    let seed = cfg.train.seed;
    let mut batches = BatchStream::new(
        dataset,
        &sources,
        cfg.train.batch_per_domain,
        rng::stream(seed, "data"),
    )?;
    let mut style_rng = rng::stream(seed, "style");
    let mut noise_rng = rng::stream(seed, "noise");
    let mut opt = AdamW::new(&model.ps, s(cfg.train.momentum), s(cfg.train.weight_decay));
    let mut log = Vec::with_capacity(cfg.train.iterations);
    for it in 0..cfg.train.iterations {
        let batch = batches.next_batch();
        // leave-one-out hygiene
        assert!(
            batch.domains.iter().all(|d| *d != cfg.train.target_domain),
            "target domain sample leaked into training batch"
        );
        model.ps.zero_grads();
        let pass = forward_train(
            &model,
            cfg,
            &batch.images,
            &batch.labels,
            &mut style_rng,
            &mut noise_rng,
        )?;
        check_finite_parts(it, &pass.parts)?;
        // loss decomposition invariant: the logged total recomposes from
        // independently recomputed parts
        let recomposed = match &pass.aug {
            Some(aug) => {
                let ce_a = cross_entropy(&pass.natural.logits, &batch.labels).0;
                let ce_b = cross_entropy(&aug.logits, &batch.labels).0;
                (ce_a + ce_b) * s::<S>(0.5)
                    + pass.hj_terms.iter().map(|t| t.total).sum::<S>()
                    + s::<S>(cfg.train.lambda_recon) * pass.vae_terms.recon
                    + s::<S>(cfg.train.lambda_kl) * pass.vae_terms.kl
            }
            None => total_loss(
                &pass.natural.logits,
                &batch.labels,
                &pass.hj_terms,
                &pass.vae_terms,
                s(cfg.train.lambda_recon),
                s(cfg.train.lambda_kl),
            ),
        };
        debug_assert!(
            (recomposed - pass.parts.total).abs() <= s(1e-7),
            "loss recomposition drift"
        );
        backward_train(&mut model, cfg, &pass);
        let lr_t = if cfg.train.cosine_schedule {
            cosine_lr(cfg.train.lr, it, cfg.train.iterations)
        } else {
            cfg.train.lr
        };
        opt.step(&mut model.ps, s(lr_t));
        log.push(IterLog {
            iter: it,
            lr: lr_t,
            ce: pass.parts.ce.as_f64(),
            hj: pass.parts.hj.as_f64(),
            recon: pass.parts.recon.as_f64(),
            kl: pass.parts.kl.as_f64(),
            total: pass.parts.total.as_f64(),
        });
    }
    Ok(TrainOutcome {
        model,
        log,
        config: cfg.clone(),
    })
}

/// Accuracy (percent) over every sample of one domain.
pub fn evaluate<S: Scalar>(
    model: &DgModel<S>,
    dataset: &Dataset<S>,
    domain: &str,
    batch_size: usize,
) -> Result<f64> {
    let idx = dataset.samples_of(domain)?;
    if idx.is_empty() {
        return Err(Error::Data(format!("domain '{domain}' has no samples")));
    }
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels, _) = dataset.batch_of(chunk);
        let (logits, _) = model.backbone.encode_image(&model.ps, &images, &[])?;
        for (row, &label) in logits.rows().into_iter().zip(labels.iter()) {
            let mut best = 0usize;
            let mut best_v = S::neg_infinity();
            for (k, v) in row.iter().enumerate() {
                if *v > best_v {
                    best_v = *v;
                    best = k;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / idx.len() as f64)
}
