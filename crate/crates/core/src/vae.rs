//! Per-hook variational encoders: a small convolutional trunk shared by both
//! branches, diagonal-Gaussian heads for the plain encoding of the original
//! feature and for the conditional encoding of the stylized feature given
//! z_0, and a mirror decoder for reconstruction.
//!
//! One instance is built per hooked layer shape; stage count adapts to the
//! spatial size so every block's maps are handled.

use crate::error::{Error, Result};
use crate::nn::{tanh_backward, tanh_forward, Linear, ParamStore, PatchConv, PatchDeconv};
use crate::scalar::{s, Scalar};
use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;

pub const LOGVAR_CLAMP: f64 = 10.0;

/// Batched diagonal Gaussian produced by an encoder head.
#[derive(Debug, Clone)]
pub struct GaussBatch<S> {
    pub mean: Array2<S>,
    pub logvar: Array2<S>,
}

impl<S: Scalar> GaussBatch<S> {
    /// Reparameterized samples; returns (z, xi).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Array2<S>, Array2<S>) {
        let xi = Array2::from_shape_fn(self.mean.dim(), |_| S::standard_normal(rng));
        let z = self.reparam(&xi);
        (z, xi)
    }

    /// z = mean + exp(logvar/2) * xi.
    pub fn reparam(&self, xi: &Array2<S>) -> Array2<S> {
        let (b, d) = self.mean.dim();
        let mut z = Array2::zeros((b, d));
        for bi in 0..b {
            for j in 0..d {
                z[[bi, j]] = self.mean[[bi, j]]
                    + (self.logvar[[bi, j]] * s::<S>(0.5)).exp() * xi[[bi, j]];
            }
        }
        z
    }

    /// Gradients of z w.r.t. (mean, logvar) given dz and the cached xi.
    pub fn reparam_backward(&self, xi: &Array2<S>, dz: &Array2<S>) -> (Array2<S>, Array2<S>) {
        let dmean = dz.clone();
        let (b, d) = self.mean.dim();
        let mut dlogvar = Array2::zeros((b, d));
        for bi in 0..b {
            for j in 0..d {
                dlogvar[[bi, j]] = dz[[bi, j]]
                    * xi[[bi, j]]
                    * (self.logvar[[bi, j]] * s::<S>(0.5)).exp()
                    * s::<S>(0.5);
            }
        }
        (dmean, dlogvar)
    }

    /// Per-row diagonal-Gaussian log-pdf of z.
    pub fn log_pdf_rows(&self, z: &Array2<S>) -> Array1<S> {
        let (b, d) = self.mean.dim();
        let half = s::<S>(0.5);
        let ln2pi = s::<S>((2.0 * std::f64::consts::PI).ln());
        Array1::from_shape_fn(b, |bi| {
            let mut acc = S::zero();
            for j in 0..d {
                let lv = self.logvar[[bi, j]];
                let diff = z[[bi, j]] - self.mean[[bi, j]];
                acc = acc - half * (ln2pi + lv) - half * diff * diff / lv.exp();
            }
            acc
        })
    }

    /// Mean over rows of KL(q || N(0, I)); returns (kl, dmean, dlogvar).
    pub fn kl_to_standard(&self) -> (S, Array2<S>, Array2<S>) {
        let (b, d) = self.mean.dim();
        let half = s::<S>(0.5);
        let inv_b = S::one() / s::<S>(b as f64);
        let mut kl = S::zero();
        let mut dmean = Array2::zeros((b, d));
        let mut dlogvar = Array2::zeros((b, d));
        for bi in 0..b {
            for j in 0..d {
                let m = self.mean[[bi, j]];
                let lv = self.logvar[[bi, j]];
                kl += half * (lv.exp() + m * m - S::one() - lv) * inv_b;
                dmean[[bi, j]] = m * inv_b;
                dlogvar[[bi, j]] = half * (lv.exp() - S::one()) * inv_b;
            }
        }
        (kl, dmean, dlogvar)
    }

    pub fn row(&self, bi: usize) -> crate::flow::GaussianCond<S> {
        crate::flow::GaussianCond {
            mean: self.mean.row(bi).to_owned(),
            logvar: self.logvar.row(bi).to_owned(),
        }
    }
}

/// Encoder/decoder pair for one hooked feature shape.
pub struct VaePerHook {
    pub trunk: Vec<PatchConv>,
    pub mean_head: Linear,
    pub logvar_head: Linear,
    pub cond_mean_head: Linear,
    pub cond_logvar_head: Linear,
    pub dec_in: Linear,
    pub dec_stages: Vec<PatchDeconv>,
    pub feat_shape: (usize, usize, usize),
    pub flat_dim: usize,
    pub latent_dim: usize,
}

pub struct TrunkCache<S> {
    /// (input rows-cache, tanh output map) per stage.
    stages: Vec<(Array2<S>, Array4<S>)>,
    flat: Array2<S>,
}

pub struct DecodeCache<S> {
    z: Array2<S>,
    post_tanh: Array2<S>,
    stage_inputs: Vec<(Array2<S>, Option<Array4<S>>)>,
}

impl VaePerHook {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        feat_shape: (usize, usize, usize),
        latent_dim: usize,
        rng: &mut R,
    ) -> Self {
        let (c, h, w) = feat_shape;
        assert_eq!(h, w, "square feature maps only");
        let std = s::<S>(0.05);
        let mut trunk = Vec::new();
        let mut cur_c = c;
        let mut cur_h = h;
        while trunk.len() < 2 && cur_h >= 2 {
            let next_c = cur_c * 2;
            trunk.push(PatchConv::init(
                ps,
                &format!("{name}.enc{}", trunk.len()),
                2,
                cur_c,
                next_c,
                std,
                S::zero(),
                rng,
            ));
            cur_c = next_c;
            cur_h /= 2;
        }
        let flat_dim = cur_c * cur_h * cur_h;
        let mean_head = Linear::init(ps, &format!("{name}.mean"), flat_dim, latent_dim, std, S::zero(), rng);
        let logvar_head = Linear::init(
            ps,
            &format!("{name}.logvar"),
            flat_dim,
            latent_dim,
            std,
            S::zero(),
            rng,
        );
        let cond_mean_head = Linear::init(
            ps,
            &format!("{name}.cond_mean"),
            flat_dim + latent_dim,
            latent_dim,
            std,
            S::zero(),
            rng,
        );
        let cond_logvar_head = Linear::init(
            ps,
            &format!("{name}.cond_logvar"),
            flat_dim + latent_dim,
            latent_dim,
            std,
            S::zero(),
            rng,
        );
        let dec_in = Linear::init(ps, &format!("{name}.dec_in"), latent_dim, flat_dim, std, S::zero(), rng);
        let mut dec_stages = Vec::new();
        for (i, stage) in trunk.iter().enumerate().rev() {
            dec_stages.push(PatchDeconv::init(
                ps,
                &format!("{name}.dec{}", trunk.len() - 1 - i),
                2,
                stage.cout,
                stage.cin,
                std,
                rng,
            ));
        }
        VaePerHook {
            trunk,
            mean_head,
            logvar_head,
            cond_mean_head,
            cond_logvar_head,
            dec_in,
            dec_stages,
            feat_shape,
            flat_dim,
            latent_dim,
        }
    }

    fn bottleneck_dims(&self) -> (usize, usize) {
        let (c, h, _) = self.feat_shape;
        let stages = self.trunk.len();
        (c << stages, h >> stages)
    }

    pub fn trunk_forward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        f: &Array4<S>,
    ) -> (Array2<S>, TrunkCache<S>) {
        let b = f.dim().0;
        let mut cur = f.clone();
        let mut stages = Vec::new();
        for conv in &self.trunk {
            let (y, rows) = conv.forward(ps, &cur);
            let mut act = y;
            act.mapv_inplace(|v| v.tanh());
            stages.push((rows, act.clone()));
            cur = act;
        }
        let flat = flatten_map(&cur, b);
        (
            flat.clone(),
            TrunkCache { stages, flat },
        )
    }

    pub fn trunk_backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &TrunkCache<S>,
        dflat: &Array2<S>,
    ) -> Array4<S> {
        let b = dflat.dim().0;
        let (bc, bh) = self.bottleneck_dims();
        let mut dcur = unflatten_map(dflat, b, bc, bh);
        for (conv, (rows, act)) in self.trunk.iter().zip(cache.stages.iter()).rev() {
            // through tanh
            let mut dy = dcur.clone();
            dy.zip_mut_with(act, |g, t| *g *= S::one() - *t * *t);
            dcur = conv.backward(ps, rows, &dy);
        }
        dcur
    }

    /// Plain encoding of the original feature.
    pub fn encode<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        f: &Array4<S>,
    ) -> (GaussBatch<S>, TrunkCache<S>) {
        let (flat, cache) = self.trunk_forward(ps, f);
        let mean = self.mean_head.forward(ps, &flat);
        let logvar = self.logvar_head.forward(ps, &flat).mapv(clamp_logvar);
        (GaussBatch { mean, logvar }, cache)
    }

    /// Conditional encoding of the stylized feature given z_0 (concatenated
    /// before the linear heads).
    pub fn encode_cond<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        f_stylized: &Array4<S>,
        z0: &Array2<S>,
    ) -> (GaussBatch<S>, TrunkCache<S>, Array2<S>) {
        let (flat, cache) = self.trunk_forward(ps, f_stylized);
        let joined = concat_cols(&flat, z0);
        let mean = self.cond_mean_head.forward(ps, &joined);
        let logvar = self.cond_logvar_head.forward(ps, &joined).mapv(clamp_logvar);
        (GaussBatch { mean, logvar }, cache, joined)
    }

    /// Backward through the plain heads; returns d flat.
    pub fn encode_backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &TrunkCache<S>,
        gauss: &GaussBatch<S>,
        dmean: &Array2<S>,
        dlogvar: &Array2<S>,
    ) -> Array2<S> {
        let dlv = clamp_logvar_backward(&gauss.logvar, dlogvar);
        let mut dflat = self.mean_head.backward(ps, &cache.flat, dmean);
        dflat += &self.logvar_head.backward(ps, &cache.flat, &dlv);
        dflat
    }

    /// Backward through the conditional heads; returns (d flat, d z0).
    pub fn encode_cond_backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        joined: &Array2<S>,
        gauss: &GaussBatch<S>,
        dmean: &Array2<S>,
        dlogvar: &Array2<S>,
    ) -> (Array2<S>, Array2<S>) {
        let dlv = clamp_logvar_backward(&gauss.logvar, dlogvar);
        let mut djoined = self.cond_mean_head.backward(ps, joined, dmean);
        djoined += &self.cond_logvar_head.backward(ps, joined, &dlv);
        let dflat = djoined.slice(ndarray::s![.., 0..self.flat_dim]).to_owned();
        let dz0 = djoined.slice(ndarray::s![.., self.flat_dim..]).to_owned();
        (dflat, dz0)
    }

    /// Decodes latents back to the feature shape.
    pub fn decode<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        z: &Array2<S>,
    ) -> (Array4<S>, DecodeCache<S>) {
        let b = z.dim().0;
        let (bc, bh) = self.bottleneck_dims();
        let post_tanh = tanh_forward(&self.dec_in.forward(ps, z));
        let mut cur = unflatten_map(&post_tanh, b, bc, bh);
        let mut stage_inputs = Vec::new();
        let n_stages = self.dec_stages.len();
        for (i, stage) in self.dec_stages.iter().enumerate() {
            let (y, rows) = stage.forward(ps, &cur);
            if i + 1 < n_stages {
                let mut act = y;
                act.mapv_inplace(|v| v.tanh());
                stage_inputs.push((rows, Some(act.clone())));
                cur = act;
            } else {
                stage_inputs.push((rows, None));
                cur = y;
            }
        }
        (
            cur,
            DecodeCache {
                z: z.clone(),
                post_tanh,
                stage_inputs,
            },
        )
    }

    /// Backward through the decoder; returns dz.
    pub fn decode_backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &DecodeCache<S>,
        drecon: &Array4<S>,
    ) -> Array2<S> {
        let b = drecon.dim().0;
        let (bc, bh) = self.bottleneck_dims();
        let mut dcur = drecon.clone();
        for (i, stage) in self.dec_stages.iter().enumerate().rev() {
            let (rows, act) = &cache.stage_inputs[i];
            if let Some(act) = act {
                dcur.zip_mut_with(act, |g, t| *g *= S::one() - *t * *t);
            }
            dcur = stage.backward(ps, rows, &dcur);
        }
        let dflat = flatten_map(&dcur, b);
        let dpre = tanh_backward(&cache.post_tanh, &dflat);
        let _ = (bc, bh);
        self.dec_in.backward(ps, &cache.z, &dpre)
    }
}

fn clamp_logvar<S: Scalar>(v: S) -> S {
    let lim = s::<S>(LOGVAR_CLAMP);
    v.max(-lim).min(lim)
}

fn clamp_logvar_backward<S: Scalar>(clamped: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
    let lim = s::<S>(LOGVAR_CLAMP);
    let mut dx = dy.clone();
    dx.zip_mut_with(clamped, |g, v| {
        if v.abs() >= lim {
            *g = S::zero();
        }
    });
    dx
}

/// (B, C, H, W) -> (B, C*H*W) with channel-major flattening.
pub fn flatten_map<S: Scalar>(x: &Array4<S>, b: usize) -> Array2<S> {
    let (bb, c, h, w) = x.dim();
    debug_assert_eq!(b, bb);
    let mut out = Array2::zeros((b, c * h * w));
    for bi in 0..b {
        let mut k = 0;
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[[bi, k]] = x[[bi, ci, y, xx]];
                    k += 1;
                }
            }
        }
    }
    out
}

pub fn unflatten_map<S: Scalar>(rows: &Array2<S>, b: usize, c: usize, h: usize) -> Array4<S> {
    let mut out = Array4::zeros((b, c, h, h));
    for bi in 0..b {
        let mut k = 0;
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..h {
                    out[[bi, ci, y, xx]] = rows[[bi, k]];
                    k += 1;
                }
            }
        }
    }
    out
}

fn concat_cols<S: Scalar>(a: &Array2<S>, b: &Array2<S>) -> Array2<S> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("concat shapes")
}

/// Mean squared error over all elements; returns (loss, dpred).
pub fn mse_loss<S: Scalar>(pred: &Array4<S>, target: &Array4<S>) -> (S, Array4<S>) {
    assert_eq!(pred.dim(), target.dim());
    let n = s::<S>(pred.len() as f64);
    let mut loss = S::zero();
    let mut grad = pred.clone();
    grad.zip_mut_with(target, |p, t| {
        let diff = *p - *t;
        loss += diff * diff;
        *p = s::<S>(2.0) * diff;
    });
    (loss / n, grad / n)
}

/// Validates clamping bounds on a raw log-variance tensor (invariant check).
pub fn logvar_in_bounds<S: Scalar>(lv: &Array2<S>) -> Result<()> {
    let lim = s::<S>(LOGVAR_CLAMP);
    if lv.iter().any(|v| v.abs() > lim) {
        return Err(Error::Numeric("logvar outside clamp bounds".into()));
    }
    Ok(())
}
