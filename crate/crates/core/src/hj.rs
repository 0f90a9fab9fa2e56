//! Hamilton-Jacobi flow constraint: the negative external force, the PDE
//! residual, the PINN-style loss over a flow path, and the batched training
//! branch that evolves latents and backpropagates through its own gradient
//! fields (double backprop, hand-derived, verified against finite
//! differences and the autodiff tape).

use crate::error::{Error, Result};
use crate::flow::path::FlowPath;
use crate::flow::potential::{MlpGradCache, Potential, PotentialMlp};
use crate::nn::ParamStore;
use crate::scalar::{s, Scalar};
use ndarray::{Array1, Array2, ArrayView1, Axis};

/// External force term f(z, t) <= 0.
pub trait ForceTerm<S: Scalar> {
    fn force(&self, z: &ArrayView1<S>, t: S) -> S;
}

/// f = 0 everywhere.
pub struct ZeroForce;
impl<S: Scalar> ForceTerm<S> for ZeroForce {
    fn force(&self, _z: &ArrayView1<S>, _t: S) -> S {
        S::zero()
    }
}

/// Constant force (tests).
pub struct ConstForce<S>(pub S);
impl<S: Scalar> ForceTerm<S> for ConstForce<S> {
    fn force(&self, _z: &ArrayView1<S>, _t: S) -> S {
        self.0
    }
}

/// The learned force: -MLP([z; t * time_scale])^2, non-positive by
/// construction.
pub struct BoundForce<'a, S> {
    pub mlp: &'a PotentialMlp,
    pub ps: &'a ParamStore<S>,
    pub time_scale: S,
}

impl<'a, S: Scalar> ForceTerm<S> for BoundForce<'a, S> {
    fn force(&self, z: &ArrayView1<S>, t: S) -> S {
        let d = z.len();
        let mut x = Array2::zeros((1, d + 1));
        for (j, v) in z.iter().enumerate() {
            x[[0, j]] = *v;
        }
        x[[0, d]] = t * self.time_scale;
        let m = self.mlp.forward(self.ps, &x)[0];
        -m * m
    }
}

/// Hamilton-Jacobi residual at (z, t):
/// `du/dt + 0.5 |grad_z u|^2 - f(z, t)`.
pub fn hj_residual<S: Scalar, P: Potential<S>, F: ForceTerm<S>>(
    u: &P,
    force: &F,
    z: &ArrayView1<S>,
    t: S,
) -> S {
    let (gz, gt) = u.grad(z, t);
    let half = s::<S>(0.5);
    let k: S = gz.iter().map(|v| *v * *v).sum();
    gt + half * k - force.force(z, t)
}

/// The PINN loss terms of one flow path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HjLossTerms<S> {
    /// Mean over t = 1..T of squared HJ residuals.
    pub residual_sq_mean: S,
    /// |grad_z u(z_0, 0)|^2.
    pub initial_term: S,
    /// residual_sq_mean + initial_term.
    pub total: S,
}

impl<S: Scalar> HjLossTerms<S> {
    pub fn validate(&self) -> Result<()> {
        if self.residual_sq_mean < S::zero()
            || self.initial_term < S::zero()
            || self.total < S::zero()
        {
            return Err(Error::Numeric("negative HJ loss term".into()));
        }
        if (self.total - (self.residual_sq_mean + self.initial_term)).abs() > s(1e-12) {
            return Err(Error::Numeric("HJ total does not recompose".into()));
        }
        Ok(())
    }

    pub fn zero() -> Self {
        HjLossTerms {
            residual_sq_mean: S::zero(),
            initial_term: S::zero(),
            total: S::zero(),
        }
    }
}

/// PINN loss over a path: squared residuals at the evolved statesplus the
/// initial-condition gradient penalty at z_0.
pub fn hj_loss<S: Scalar, P: Potential<S>, F: ForceTerm<S>>(
    path: &FlowPath<S>,
    u: &P,
    force: &F,
) -> Result<HjLossTerms<S>> {
    let t_steps = path.steps();
    if t_steps < 1 {
        return Err(Error::Config("hj_loss needs a path with T >= 1".into()));
    }
    let mut acc = S::zero();
    for t in 1..=t_steps {
        let st = &path.states[t];
        let r = hj_residual(u, force, &st.z.view(), s(t as f64));
        acc += r * r;
    }
    let residual_sq_mean = acc / s::<S>(t_steps as f64);
    let (g0, _) = u.grad(&path.states[0].z.view(), S::zero());
    let initial_term: S = g0.iter().map(|v| *v * *v).sum();
    let terms = HjLossTerms {
        residual_sq_mean,
        initial_term,
        total: residual_sq_mean + initial_term,
    };
    terms.validate()?;
    Ok(terms)
}

// ─── batched training branch ─────────────────────────────────────────────────

/// Forward state of the batched flow branch: latents evolved from z_0 under
/// grad u, HJ residuals along the way, and every cache the double-backward
/// needs.
pub struct FlowBranch<S> {
    /// z_t for t = 0..=T, each (B, d).
    pub z_path: Vec<Array2<S>>,
    /// spatial gradients grad_z u(z_t, t) for t = 0..=T.
    pub gz: Vec<Array2<S>>,
    /// normalized-time gradients at each step (B,).
    pub gtau: Vec<Array1<S>>,
    /// r_t, t = 1..=T, shape (B, T).
    pub residuals: Array2<S>,
    /// raw force-net outputs m_t for t = 1..=T.
    pub force_m: Vec<Array1<S>>,
    u_caches: Vec<MlpGradCache<S>>,
    f_acts: Vec<Vec<Array2<S>>>,
    pub steps: usize,
    /// Batch-mean loss terms.
    pub terms: HjLossTerms<S>,
}

fn pack_time<S: Scalar>(z: &Array2<S>, tau: S) -> Array2<S> {
    let (b, d) = z.dim();
    let mut x = Array2::zeros((b, d + 1));
    x.slice_mut(ndarray::s![.., 0..d]).assign(z);
    for bi in 0..b {
        x[[bi, d]] = tau;
    }
    x
}

/// Evolves a batch of latents for `steps` flow steps and evaluates the HJ
/// loss. Time is fed to both networks as t / steps.
pub fn flow_branch_forward<S: Scalar>(
    ps: &ParamStore<S>,
    u_net: &PotentialMlp,
    force_net: &PotentialMlp,
    z0: &Array2<S>,
    steps: usize,
) -> Result<FlowBranch<S>> {
    if steps < 1 {
        return Err(Error::Config("flow branch needs T >= 1".into()));
    }
    let (b, d) = z0.dim();
    if d + 1 != u_net.in_dim {
        return Err(Error::Config("latent dim incompatible with potential".into()));
    }
    let t_inv = S::one() / s::<S>(steps as f64);
    let mut z_path = vec![z0.clone()];
    let mut gz = Vec::with_capacity(steps + 1);
    let mut gtau = Vec::with_capacity(steps + 1);
    let mut u_caches = Vec::with_capacity(steps + 1);
    let mut f_acts = Vec::with_capacity(steps);
    let mut force_m = Vec::with_capacity(steps);
    let mut residuals = Array2::zeros((b, steps));
    for t in 0..=steps {
        let tau = s::<S>(t as f64) * t_inv;
        let x = pack_time(&z_path[t], tau);
        let (_, g, cache) = u_net.grad_batch(ps, &x);
        let gz_t = g.slice(ndarray::s![.., 0..d]).to_owned();
        let gtau_t = g.index_axis(Axis(1), d).to_owned();
        if t < steps {
            let z_next = &z_path[t] + &gz_t;
            if z_next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite flow state".into()));
            }
            z_path.push(z_next);
        }
        if t >= 1 {
            let (m, acts) = force_net.forward_cached(ps, &x);
            for bi in 0..b {
                let k: S = gz_t.row(bi).iter().map(|v| *v * *v).sum();
                let r = gtau_t[bi] * t_inv + s::<S>(0.5) * k + m[bi] * m[bi];
                residuals[[bi, t - 1]] = r;
            }
            force_m.push(m);
            f_acts.push(acts);
        }
        gz.push(gz_t);
        gtau.push(gtau_t);
        u_caches.push(cache);
    }
    let inv_b = S::one() / s::<S>(b as f64);
    let mut res_mean = S::zero();
    for v in residuals.iter() {
        res_mean += *v * *v;
    }
    res_mean = res_mean * t_inv * inv_b;
    let mut init = S::zero();
    for v in gz[0].iter() {
        init += *v * *v;
    }
    init *= inv_b;
    let terms = HjLossTerms {
        residual_sq_mean: res_mean,
        initial_term: init,
        total: res_mean + init,
    };
    Ok(FlowBranch {
        z_path,
        gz,
        gtau,
        residuals,
        force_m,
        u_caches,
        f_acts,
        steps,
        terms,
    })
}

/// Backward of `weight * terms.total` through the whole branch: accumulates
/// u-net and force-net parameter gradients and returns d loss / d z_0.
pub fn flow_branch_backward<S: Scalar>(
    ps: &mut ParamStore<S>,
    u_net: &PotentialMlp,
    force_net: &PotentialMlp,
    br: &FlowBranch<S>,
    weight: S,
) -> Array2<S> {
    flow_branch_backward_with(ps, u_net, force_net, br, weight, None)
}

/// As [`flow_branch_backward`], with an optional upstream gradient on the
/// final state z_T (endpoint losses).
pub fn flow_branch_backward_with<S: Scalar>(
    ps: &mut ParamStore<S>,
    u_net: &PotentialMlp,
    force_net: &PotentialMlp,
    br: &FlowBranch<S>,
    weight: S,
    dz_final: Option<&Array2<S>>,
) -> Array2<S> {
    let steps = br.steps;
    let (b, d) = br.z_path[0].dim();
    let t_inv = S::one() / s::<S>(steps as f64);
    let inv_b = S::one() / s::<S>(b as f64);
    let two = s::<S>(2.0);
    // z-bar of the step being assembled, seeded with the endpoint upstream
    let mut z_bar = match dz_final {
        Some(g) => g.clone(),
        None => Array2::<S>::zeros((b, d)),
    };
    for t in (0..=steps).rev() {
        // upstream on the gradient field at step t
        let mut v = Array2::<S>::zeros((b, d + 1));
        if t >= 1 {
            // residual terms: d total / d r_t = 2 r_t / (B T)
            let m = &br.force_m[t - 1];
            let mut du_f = Array1::zeros(b);
            for bi in 0..b {
                let r_bar = weight * two * br.residuals[[bi, t - 1]] * t_inv * inv_b;
                du_f[bi] = r_bar * two * m[bi];
                for j in 0..d {
                    v[[bi, j]] += r_bar * br.gz[t][[bi, j]];
                }
                v[[bi, d]] += r_bar * t_inv;
            }
            let x_bar_f = force_net.backward_value(ps, &br.f_acts[t - 1], &du_f);
            if t < steps {
                for bi in 0..b {
                    for j in 0..d {
                        v[[bi, j]] += z_bar[[bi, j]];
                    }
                }
            }
            let x_bar_u = u_net.vjp_grad(ps, &br.u_caches[t], &v, None);
            let mut z_bar_next = x_bar_u.slice(ndarray::s![.., 0..d]).to_owned();
            z_bar_next += &x_bar_f.slice(ndarray::s![.., 0..d]);
            // the identity path: z_{t+1} adjoint at t < T, endpoint upstream at t = T
            z_bar_next += &z_bar;
            z_bar = z_bar_next;
        } else {
            // t = 0: initial-condition term plus the first evolution step
            for bi in 0..b {
                for j in 0..d {
                    v[[bi, j]] = weight * two * inv_b * br.gz[0][[bi, j]];
                }
            }
            if steps > 0 {
                for bi in 0..b {
                    for j in 0..d {
                        v[[bi, j]] += z_bar[[bi, j]];
                    }
                }
            }
            let x_bar_u = u_net.vjp_grad(ps, &br.u_caches[0], &v, None);
            let mut z0_bar = x_bar_u.slice(ndarray::s![.., 0..d]).to_owned();
            z0_bar += &z_bar;
            z_bar = z0_bar;
        }
    }
    z_bar
}
