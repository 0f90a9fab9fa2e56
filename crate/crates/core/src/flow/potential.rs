//! Scalar potentials on (z, t): the learned MLP potentials that drive flow
//! evolution, plus analytic potentials used by tests and oracles.
//!
//! The MLP exposes hand-derived input gradients, Hessian-vector products,
//! and the vector-Jacobian product of its own gradient map (double
//! backpropagation), all vectorized over batches. Every formula here is
//! cross-checked against finite differences and the scalar autodiff engine.

use crate::autodiff::{Tape, Var};
use crate::nn::{Linear, ParamStore};
use crate::scalar::{s, Scalar};
use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::Rng;

/// A scalar field u(z, t) with enough calculus for flow evolution.
pub trait Potential<S: Scalar> {
    fn dim(&self) -> usize;
    fn value(&self, z: &ArrayView1<S>, t: S) -> S;
    /// (spatial gradient dz, time derivative dt).
    fn grad(&self, z: &ArrayView1<S>, t: S) -> (Array1<S>, S);
    /// Spatial Hessian, (d, d).
    fn hessian_z(&self, z: &ArrayView1<S>, t: S) -> Array2<S>;
}

// ─── analytic potentials (test fixtures and oracles) ─────────────────────────

/// u(z) = 0.5 z^T Q z + b . z (time independent).
#[derive(Debug, Clone)]
pub struct QuadraticPotential<S> {
    pub q: Array2<S>,
    pub b: Array1<S>,
}

impl<S: Scalar> Potential<S> for QuadraticPotential<S> {
    fn dim(&self) -> usize {
        self.b.len()
    }
    fn value(&self, z: &ArrayView1<S>, _t: S) -> S {
        let qz = self.q.dot(z);
        s::<S>(0.5) * z.dot(&qz) + self.b.dot(z)
    }
    fn grad(&self, z: &ArrayView1<S>, _t: S) -> (Array1<S>, S) {
        // symmetric part drives the gradient
        let qz = self.q.dot(z);
        let qtz = self.q.t().dot(z);
        ((qz + qtz) * s::<S>(0.5) + &self.b, S::zero())
    }
    fn hessian_z(&self, _z: &ArrayView1<S>, _t: S) -> Array2<S> {
        (&self.q + &self.q.t()) * s::<S>(0.5)
    }
}

/// u(z, t) = a . z - 0.5 |a|^2 t, an exact Hamilton-Jacobi solution with
/// zero external force.
#[derive(Debug, Clone)]
pub struct LinearPotential<S> {
    pub a: Array1<S>,
}

impl<S: Scalar> Potential<S> for LinearPotential<S> {
    fn dim(&self) -> usize {
        self.a.len()
    }
    fn value(&self, z: &ArrayView1<S>, t: S) -> S {
        let n2: S = self.a.iter().map(|v| *v * *v).sum();
        self.a.dot(z) - s::<S>(0.5) * n2 * t
    }
    fn grad(&self, _z: &ArrayView1<S>, _t: S) -> (Array1<S>, S) {
        let n2: S = self.a.iter().map(|v| *v * *v).sum();
        (self.a.clone(), -s::<S>(0.5) * n2)
    }
    fn hessian_z(&self, _z: &ArrayView1<S>, _t: S) -> Array2<S> {
        Array2::zeros((self.a.len(), self.a.len()))
    }
}

// ─── the learned MLP potential ───────────────────────────────────────────────

/// Tanh MLP on [z; tau] -> scalar. `tau` is the caller's normalized time.
#[derive(Debug, Clone)]
pub struct PotentialMlp {
    pub layers: Vec<Linear>,
    pub out: Linear,
    pub in_dim: usize,
    pub hidden: Vec<usize>,
}

/// Forward workspace for gradient / double-backward evaluation.
pub struct MlpGradCache<S> {
    /// acts[0] = x, acts[l] = tanh activations of layer l, l = 1..=L.
    pub acts: Vec<Array2<S>>,
    /// p[l-1]: gradient of u w.r.t. acts[l-1].. stored for l = 1..=L+? see grad_batch.
    pub p_chain: Vec<Array2<S>>,
    /// q[l-1]: gradient of u w.r.t. pre-activations of layer l.
    pub q_chain: Vec<Array2<S>>,
}

impl PotentialMlp {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        init_std: S,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::new();
        let mut prev = in_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::init(
                ps,
                &format!("{name}.h{i}"),
                prev,
                h,
                init_std,
                S::zero(),
                rng,
            ));
            prev = h;
        }
        let out = Linear::init(ps, &format!("{name}.out"), prev, 1, init_std, S::zero(), rng);
        PotentialMlp {
            layers,
            out,
            in_dim,
            hidden: hidden.to_vec(),
        }
    }

    /// All parameter ids, weights then biases per layer, input to output.
    pub fn param_ids(&self) -> Vec<crate::nn::ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.push(l.w);
            ids.push(l.b);
        }
        ids.push(self.out.w);
        ids.push(self.out.b);
        ids
    }

    /// Plain forward with activation caches (for first-order backprop).
    pub fn forward_cached<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: &Array2<S>,
    ) -> (Array1<S>, Vec<Array2<S>>) {
        let mut acts = vec![x.clone()];
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward(ps, &cur).mapv(|v| v.tanh());
            acts.push(cur.clone());
        }
        let u = self.out.forward(ps, &cur);
        (u.index_axis(Axis(1), 0).to_owned(), acts)
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, x: &Array2<S>) -> Array1<S> {
        self.forward_cached(ps, x).0
    }

    /// First-order backward for the scalar output; accumulates parameter
    /// grads and returns dx. `du` is (B,).
    pub fn backward_value<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        acts: &[Array2<S>],
        du: &Array1<S>,
    ) -> Array2<S> {
        let b = du.len();
        let mut dcur = Array2::zeros((b, 1));
        for (i, v) in du.iter().enumerate() {
            dcur[[i, 0]] = *v;
        }
        let mut d = self.out.backward(ps, acts.last().unwrap(), &dcur);
        for (li, l) in self.layers.iter().enumerate().rev() {
            // through tanh of layer li
            let a = &acts[li + 1];
            d.zip_mut_with(a, |g, t| *g *= S::one() - *t * *t);
            d = l.backward(ps, &acts[li], &d);
        }
        d
    }

    /// Value and full input gradient for a batch of rows, with the cache
    /// required by [`Self::vjp_grad`] and [`Self::hvp`].
    ///
    /// Returns (u, g) with u (B,) and g (B, in_dim).
    pub fn grad_batch<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: &Array2<S>,
    ) -> (Array1<S>, Array2<S>, MlpGradCache<S>) {
        let (u, acts) = self.forward_cached(ps, x);
        let b = x.dim().0;
        let n_layers = self.layers.len();
        // p_L = w broadcast over rows
        let w_out = ps.p2(self.out.w); // (1, n_L)
        let mut p = Array2::zeros((b, w_out.dim().1));
        for mut row in p.rows_mut() {
            row.assign(&w_out.row(0));
        }
        let mut p_chain = vec![Array2::zeros((0, 0)); n_layers];
        let mut q_chain = vec![Array2::zeros((0, 0)); n_layers];
        for li in (0..n_layers).rev() {
            let a = &acts[li + 1];
            let mut q = p.clone();
            q.zip_mut_with(a, |qv, t| *qv *= S::one() - *t * *t);
            let p_prev = q.dot(&ps.p2(self.layers[li].w));
            p_chain[li] = p;
            q_chain[li] = q;
            p = p_prev;
        }
        let g = p.clone();
        (
            u,
            g,
            MlpGradCache {
                acts,
                p_chain,
                q_chain,
            },
        )
    }

    /// VJP of the gradient map (double backward): given upstream `v` on the
    /// input gradient g and optional upstream `du` on the value u,
    /// accumulates parameter gradients and returns the input adjoint.
    ///
    /// Implements the reverse pass over the combined forward+backward graph:
    /// a rising sweep over the gradient chain, then a falling sweep over the
    /// activation chain.
    pub fn vjp_grad<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &MlpGradCache<S>,
        v: &Array2<S>,
        du: Option<&Array1<S>>,
    ) -> Array2<S> {
        let n_layers = self.layers.len();
        let b = v.dim().0;
        // rising sweep: r_p[l-1] -> r_q[l] -> r_p[l]
        let mut r_p = v.clone();
        let mut rh2: Vec<Array2<S>> = Vec::with_capacity(n_layers);
        for li in 0..n_layers {
            let w = ps.p2(self.layers[li].w).to_owned();
            let r_q = r_p.dot(&w.t());
            // W_l adjoint from p_{l-1} = q_l W_l
            let dw = cache.q_chain[li].t().dot(&r_p);
            ps.acc_grad(self.layers[li].w, &dw.into_dyn().view());
            let a = &cache.acts[li + 1];
            // r_p[l] = r_q * sigma'(h_l)
            let mut r_p_next = r_q.clone();
            r_p_next.zip_mut_with(a, |g, t| *g *= S::one() - *t * *t);
            // h_l adjoint via sigma'': -2 a (1 - a^2)
            let mut h2 = r_q;
            h2.zip_mut_with(&cache.p_chain[li], |g, p| *g *= *p);
            h2.zip_mut_with(a, |g, t| *g *= -s::<S>(2.0) * *t * (S::one() - *t * *t));
            rh2.push(h2);
            r_p = r_p_next;
        }
        // p_L = w: accumulate into w
        {
            let dw_out = r_p.sum_axis(Axis(0)).insert_axis(Axis(0));
            ps.acc_grad(self.out.w, &dw_out.into_dyn().view());
        }
        // falling sweep over the activation chain
        // r_a[L] from optional value upstream
        let n_last = cache.acts[n_layers].dim().1;
        let mut r_a = Array2::zeros((b, n_last));
        if let Some(du) = du {
            let w_out = ps.p2(self.out.w).to_owned(); // (1, n_L)
            for (i, duv) in du.iter().enumerate() {
                for j in 0..n_last {
                    r_a[[i, j]] = *duv * w_out[[0, j]];
                }
            }
            let dw_out = {
                let mut dcur = Array2::zeros((b, 1));
                for (i, duv) in du.iter().enumerate() {
                    dcur[[i, 0]] = *duv;
                }
                dcur.t().dot(&cache.acts[n_layers])
            };
            ps.acc_grad(self.out.w, &dw_out.into_dyn().view());
            let db_out = Array1::from_elem(1, du.iter().cloned().sum::<S>());
            ps.acc_grad(self.out.b, &db_out.into_dyn().view());
        }
        for li in (0..n_layers).rev() {
            let a = &cache.acts[li + 1];
            // r_h = rh2 + r_a * sigma'
            let mut r_h = r_a.clone();
            r_h.zip_mut_with(a, |g, t| *g *= S::one() - *t * *t);
            r_h += &rh2[li];
            let dw = r_h.t().dot(&cache.acts[li]);
            let db = r_h.sum_axis(Axis(0));
            ps.acc_grad(self.layers[li].w, &dw.into_dyn().view());
            ps.acc_grad(self.layers[li].b, &db.into_dyn().view());
            r_a = r_h.dot(&ps.p2(self.layers[li].w));
        }
        r_a
    }

    /// Hessian-vector products: for each row b, H(x_b) tangent_b, where H is
    /// the full input Hessian. Forward-over-reverse with hand-derived rules.
    pub fn hvp<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        cache: &MlpGradCache<S>,
        tangent: &Array2<S>,
    ) -> Array2<S> {
        let n_layers = self.layers.len();
        // rising tangents of activations
        let mut da = tangent.clone();
        let mut dh_chain: Vec<Array2<S>> = Vec::with_capacity(n_layers);
        for li in 0..n_layers {
            let w = ps.p2(self.layers[li].w);
            let dh = da.dot(&w.t().to_owned());
            let a = &cache.acts[li + 1];
            let mut da_next = dh.clone();
            da_next.zip_mut_with(a, |g, t| *g *= S::one() - *t * *t);
            dh_chain.push(dh);
            da = da_next;
        }
        // falling tangents of the gradient chain; dp_L = 0
        let n_last = cache.acts[n_layers].dim().1;
        let mut dp = Array2::zeros((tangent.dim().0, n_last));
        for li in (0..n_layers).rev() {
            let a = &cache.acts[li + 1];
            // dq = dp * sigma' + p * sigma'' * dh
            let mut dq = dp.clone();
            dq.zip_mut_with(a, |g, t| *g *= S::one() - *t * *t);
            let mut extra = cache.p_chain[li].clone();
            extra.zip_mut_with(a, |g, t| *g *= -s::<S>(2.0) * *t * (S::one() - *t * *t));
            extra.zip_mut_with(&dh_chain[li], |g, d| *g *= *d);
            dq += &extra;
            dp = dq.dot(&ps.p2(self.layers[li].w).to_owned());
        }
        dp
    }

    /// Spatial Hessians for every row: (B, d, d) where d = spatial dim
    /// (`in_dim - 1` when the last input coordinate is time, or `in_dim`).
    pub fn hessian_spatial<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        cache: &MlpGradCache<S>,
        spatial_dim: usize,
    ) -> Array3<S> {
        let b = cache.acts[0].dim().0;
        let mut hess = Array3::zeros((b, spatial_dim, spatial_dim));
        for j in 0..spatial_dim {
            let mut tangent = Array2::zeros((b, self.in_dim));
            for bi in 0..b {
                tangent[[bi, j]] = S::one();
            }
            let col = self.hvp(ps, cache, &tangent);
            for bi in 0..b {
                for i in 0..spatial_dim {
                    hess[[bi, i, j]] = col[[bi, i]];
                }
            }
        }
        hess
    }

    /// Mirrors the network symbolically onto an autodiff tape.
    pub fn to_tape<S: Scalar>(&self, ps: &ParamStore<S>, tape: &mut Tape<S>) -> TapeMlp {
        let mut layers = Vec::new();
        for l in self.layers.iter().chain(std::iter::once(&self.out)) {
            let w = ps.p2(l.w);
            let bvec = ps.p1(l.b);
            let w_vars: Vec<Vec<Var>> = (0..w.dim().0)
                .map(|i| (0..w.dim().1).map(|j| tape.leaf(w[[i, j]])).collect())
                .collect();
            let b_vars: Vec<Var> = bvec.iter().map(|v| tape.leaf(*v)).collect();
            layers.push((w_vars, b_vars));
        }
        TapeMlp { layers }
    }
}

/// Symbolic mirror of a [`PotentialMlp`] on an autodiff tape.
pub struct TapeMlp {
    /// (weights row-major, biases) per layer; the last entry is the output head.
    pub layers: Vec<(Vec<Vec<Var>>, Vec<Var>)>,
}

impl TapeMlp {
    /// Evaluates u(x) symbolically; hidden layers tanh, output linear.
    pub fn eval<S: Scalar>(&self, tape: &mut Tape<S>, x: &[Var]) -> Var {
        let mut cur: Vec<Var> = x.to_vec();
        let n = self.layers.len();
        for (li, (w, b)) in self.layers.iter().enumerate() {
            let mut next = Vec::with_capacity(w.len());
            for (row, bias) in w.iter().zip(b.iter()) {
                let mut acc = *bias;
                for (wij, xj) in row.iter().zip(cur.iter()) {
                    let p = tape.mul(*wij, *xj);
                    acc = tape.add(acc, p);
                }
                if li + 1 < n {
                    acc = tape.tanh(acc);
                }
                next.push(acc);
            }
            cur = next;
        }
        cur[0]
    }

    /// Parameter vars in [`PotentialMlp::param_ids`] order, flattened
    /// row-major per tensor.
    pub fn param_vars(&self) -> Vec<Vec<Var>> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.push(w.iter().flatten().cloned().collect());
            out.push(b.clone());
        }
        out
    }
}

/// A [`PotentialMlp`] bound to its store with a time normalization, exposing
/// the [`Potential`] interface in physical time: the network sees
/// tau = t * time_scale, so d/dt carries the chain-rule factor.
pub struct BoundPotential<'a, S> {
    pub mlp: &'a PotentialMlp,
    pub ps: &'a ParamStore<S>,
    pub time_scale: S,
}

impl<'a, S: Scalar> BoundPotential<'a, S> {
    fn pack(&self, z: &ArrayView1<S>, t: S) -> Array2<S> {
        let d = z.len();
        let mut x = Array2::zeros((1, d + 1));
        for (j, v) in z.iter().enumerate() {
            x[[0, j]] = *v;
        }
        x[[0, d]] = t * self.time_scale;
        x
    }
}

impl<'a, S: Scalar> Potential<S> for BoundPotential<'a, S> {
    fn dim(&self) -> usize {
        self.mlp.in_dim - 1
    }
    fn value(&self, z: &ArrayView1<S>, t: S) -> S {
        let x = self.pack(z, t);
        self.mlp.forward(self.ps, &x)[0]
    }
    fn grad(&self, z: &ArrayView1<S>, t: S) -> (Array1<S>, S) {
        let d = z.len();
        let x = self.pack(z, t);
        let (_, g, _) = self.mlp.grad_batch(self.ps, &x);
        let gz = g.slice(ndarray::s![0, 0..d]).to_owned();
        let gt = g[[0, d]] * self.time_scale;
        (gz, gt)
    }
    fn hessian_z(&self, z: &ArrayView1<S>, t: S) -> Array2<S> {
        let d = z.len();
        let x = self.pack(z, t);
        let (_, _, cache) = self.mlp.grad_batch(self.ps, &x);
        let h = self.mlp.hessian_spatial(self.ps, &cache, d);
        h.index_axis(Axis(0), 0).to_owned()
    }
}
