//! Minimal neural-network toolkit: a central parameter store, linear and
//! normalization layers with hand-written backward passes, patchwise
//! convolutions, and the AdamW optimizer with a cosine schedule.
//!
//! There is no tape. Each layer caches what its backward needs; callers
//! chain `forward`/`backward` explicitly, which keeps every run bit-for-bit
//! deterministic for a given seed.

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1, ArrayView2, ArrayViewD, Axis, Ix1, Ix2};
use rand::Rng;

// ─── parameter store ─────────────────────────────────────────────────────────

/// Handle to a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

struct Entry<S> {
    name: String,
    value: ArrayD<S>,
    grad: ArrayD<S>,
}

/// Flat registry of all trainable tensors of a model. The optimizer,
/// checkpoint serialization, and finite-difference checks all address
/// parameters through it.
pub struct ParamStore<S> {
    entries: Vec<Entry<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<S>) -> ParamId {
        let grad = ArrayD::zeros(value.raw_dim());
        self.entries.push(Entry {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> ArrayViewD<'_, S> {
        self.entries[id.0].value.view()
    }

    pub fn p1(&self, id: ParamId) -> ArrayView1<'_, S> {
        self.entries[id.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("param is not rank 1")
    }

    pub fn p2(&self, id: ParamId) -> ArrayView2<'_, S> {
        self.entries[id.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("param is not rank 2")
    }

    pub fn grad(&self, id: ParamId) -> ArrayViewD<'_, S> {
        self.entries[id.0].grad.view()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.entries[id.0].value
    }

    /// Accumulates `g` into the gradient of `id`.
    pub fn acc_grad(&mut self, id: ParamId, g: &ArrayViewD<'_, S>) {
        let e = &mut self.entries[id.0];
        assert_eq!(e.grad.shape(), g.shape(), "grad shape mismatch: {}", e.name);
        e.grad += g;
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(S::zero());
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Flat read access for finite-difference checks.
    pub fn get_flat(&self, id: ParamId, k: usize) -> S {
        *self.entries[id.0].value.as_slice().unwrap().get(k).unwrap()
    }

    pub fn set_flat(&mut self, id: ParamId, k: usize, v: S) {
        self.entries[id.0].value.as_slice_mut().unwrap()[k] = v;
    }

    pub fn flat_len(&self, id: ParamId) -> usize {
        self.entries[id.0].value.len()
    }

    pub fn grad_flat(&self, id: ParamId, k: usize) -> S {
        self.entries[id.0].grad.as_slice().unwrap()[k]
    }

    /// All ids, in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Serializes every parameter as (name, shape, f64 little-endian data).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"DGFB");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            let nb = e.name.as_bytes();
            out.extend_from_slice(&(nb.len() as u64).to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(e.value.ndim() as u64).to_le_bytes());
            for d in e.value.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in e.value.iter() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    /// Loads values (by position) from bytes produced by [`Self::to_bytes`].
    /// Names and shapes must match the already-constructed store.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let mut cur = 0usize;
        let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
            if *cur + n > bytes.len() {
                return Err(Error::Data("truncated parameter blob".into()));
            }
            let sl = &bytes[*cur..*cur + n];
            *cur += n;
            Ok(sl)
        };
        let magic = take(&mut cur, 4)?;
        if magic != b"DGFB" {
            return Err(Error::Data("bad parameter blob magic".into()));
        }
        let _ver = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
        let n = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
        if n != self.entries.len() {
            return Err(Error::Data(format!(
                "parameter count mismatch: blob has {n}, model has {}",
                self.entries.len()
            )));
        }
        for e in &mut self.entries {
            let name_len = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut cur, name_len)?)
                .map_err(|_| Error::Data("bad utf8 in blob".into()))?;
            if name != e.name {
                return Err(Error::Data(format!(
                    "parameter name mismatch: blob '{name}', model '{}'",
                    e.name
                )));
            }
            let ndim = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize);
            }
            if shape != e.value.shape() {
                return Err(Error::Data(format!("shape mismatch for '{name}'")));
            }
            for v in e.value.iter_mut() {
                let raw = f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap());
                *v = crate::scalar::s::<S>(raw);
            }
        }
        if cur != bytes.len() {
            return Err(Error::Data("trailing bytes in parameter blob".into()));
        }
        Ok(())
    }
}

// ─── initializers ────────────────────────────────────────────────────────────

/// Truncated normal (std `std`, resampled beyond 2 std).
pub fn trunc_normal<S: Scalar, R: Rng + ?Sized>(rng: &mut R, std: S) -> S {
    loop {
        let v = S::standard_normal(rng) * std;
        if v.abs() <= std * s(2.0) {
            return v;
        }
    }
}

pub fn trunc_normal_array<S: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: (usize, usize),
    std: S,
) -> Array2<S> {
    Array2::from_shape_fn(shape, |_| trunc_normal(rng, std))
}

// ─── linear layer ────────────────────────────────────────────────────────────

/// `y = x W^T + b` over rows of `x`. Weight is (out, in).
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: S,
        bias_init: S,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            trunc_normal_array(rng, (out_dim, in_dim), std).into_dyn(),
        );
        let b = ps.add(
            format!("{name}.b"),
            Array1::from_elem(out_dim, bias_init).into_dyn(),
        );
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, x: &Array2<S>) -> Array2<S> {
        let mut y = x.dot(&self.w_t(ps));
        y += &ps.p1(self.b);
        y
    }

    fn w_t<S: Scalar>(&self, ps: &ParamStore<S>) -> Array2<S> {
        ps.p2(self.w).t().to_owned()
    }

    /// Accumulates dW, db; returns dx.
    pub fn backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        x: &Array2<S>,
        dy: &Array2<S>,
    ) -> Array2<S> {
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(Axis(0));
        let dx = dy.dot(&ps.p2(self.w));
        ps.acc_grad(self.w, &dw.into_dyn().view());
        ps.acc_grad(self.b, &db.into_dyn().view());
        dx
    }
}

// ─── layer norm ──────────────────────────────────────────────────────────────

/// Normalization over the last axis of (rows, C) with learned affine.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

pub struct LayerNormCache<S> {
    xhat: Array2<S>,
    inv_std: Array1<S>,
}

impl LayerNorm {
    pub fn init<S: Scalar>(
        ps: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        gamma_init: S,
        beta_init: S,
    ) -> Self {
        let gamma = ps.add(
            format!("{name}.gamma"),
            Array1::from_elem(dim, gamma_init).into_dyn(),
        );
        let beta = ps.add(
            format!("{name}.beta"),
            Array1::from_elem(dim, beta_init).into_dyn(),
        );
        LayerNorm {
            gamma,
            beta,
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: &Array2<S>,
    ) -> (Array2<S>, LayerNormCache<S>) {
        let c = s::<S>(self.dim as f64);
        let mean = x.sum_axis(Axis(1)) / c;
        let mut xhat = x.clone();
        for (mut row, m) in xhat.rows_mut().into_iter().zip(mean.iter()) {
            row.mapv_inplace(|v| v - *m);
        }
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / c;
        let inv_std = var.mapv(|v| S::one() / (v + s(self.eps)).sqrt());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter()) {
            row.mapv_inplace(|v| v * *is);
        }
        let gamma = ps.p1(self.gamma);
        let beta = ps.p1(self.beta);
        let mut y = xhat.clone();
        for mut row in y.rows_mut() {
            row.zip_mut_with(&gamma, |v, g| *v *= *g);
            row.zip_mut_with(&beta, |v, b| *v += *b);
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &LayerNormCache<S>,
        dy: &Array2<S>,
    ) -> Array2<S> {
        let c = s::<S>(self.dim as f64);
        let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));
        let gamma = ps.p1(self.gamma).to_owned();
        let mut dxhat = dy.clone();
        for mut row in dxhat.rows_mut() {
            row.zip_mut_with(&gamma, |v, g| *v *= *g);
        }
        let sum_dxhat = dxhat.sum_axis(Axis(1));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1));
        let mut dx = dxhat;
        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
            let a = sum_dxhat[i] / c;
            let b = sum_dxhat_xhat[i] / c;
            let is = cache.inv_std[i];
            let xh = cache.xhat.row(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = is * (*v - a - xh[j] * b);
            }
        }
        ps.acc_grad(self.gamma, &dgamma.into_dyn().view());
        ps.acc_grad(self.beta, &dbeta.into_dyn().view());
        dx
    }
}

// ─── activations ─────────────────────────────────────────────────────────────

pub fn tanh_forward<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    x.mapv(|v| v.tanh())
}

/// `y` is the tanh output.
pub fn tanh_backward<S: Scalar>(y: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, t| *d *= S::one() - *t * *t);
    dx
}

pub fn softplus<S: Scalar>(x: S) -> S {
    if x > s(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Mean softmax cross-entropy over a batch; returns (loss, dlogits).
pub fn cross_entropy<S: Scalar>(logits: &Array2<S>, labels: &[usize]) -> (S, Array2<S>) {
    let (b, k) = logits.dim();
    assert_eq!(labels.len(), b);
    let mut dlogits = Array2::zeros((b, k));
    let mut loss = S::zero();
    let inv_b = S::one() / s::<S>(b as f64);
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let maxv = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut denom = S::zero();
        for v in row.iter() {
            denom += (*v - maxv).exp();
        }
        let lse = maxv + denom.ln();
        loss += (lse - row[label]) * inv_b;
        for j in 0..k {
            let p = (row[j] - lse).exp();
            dlogits[[i, j]] = (p - if j == label { S::one() } else { S::zero() }) * inv_b;
        }
    }
    (loss, dlogits)
}

// ─── patchwise convolutions ──────────────────────────────────────────────────

/// Non-overlapping `p x p` patch convolution: (B, Cin, H, W) -> (B, Cout, H/p, W/p).
/// Used for the image stem, inter-block downsampling, and VAE encoder stages.
#[derive(Debug, Clone, Copy)]
pub struct PatchConv {
    pub lin: Linear,
    pub patch: usize,
    pub cin: usize,
    pub cout: usize,
}

impl PatchConv {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        patch: usize,
        cin: usize,
        cout: usize,
        std: S,
        bias_init: S,
        rng: &mut R,
    ) -> Self {
        let lin = Linear::init(ps, name, cin * patch * patch, cout, std, bias_init, rng);
        PatchConv {
            lin,
            patch,
            cin,
            cout,
        }
    }

    /// Gathers patches into rows: (B*Ho*Wo, cin*p*p), column layout
    /// c * p*p + dy * p + dx.
    pub fn gather<S: Scalar>(&self, x: &Array4<S>) -> Array2<S> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.cin);
        let p = self.patch;
        assert!(
            h % p == 0 && w % p == 0,
            "spatial size ({h},{w}) not divisible by patch {p}"
        );
        let (ho, wo) = (h / p, w / p);
        let mut rows = Array2::zeros((b * ho * wo, c * p * p));
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let r = (bi * ho + oy) * wo + ox;
                    for ci in 0..c {
                        for dy in 0..p {
                            for dx in 0..p {
                                rows[[r, ci * p * p + dy * p + dx]] =
                                    x[[bi, ci, oy * p + dy, ox * p + dx]];
                            }
                        }
                    }
                }
            }
        }
        rows
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: &Array4<S>,
    ) -> (Array4<S>, Array2<S>) {
        let (b, _, h, w) = x.dim();
        let (ho, wo) = (h / self.patch, w / self.patch);
        let rows = self.gather(x);
        let y = self.lin.forward(ps, &rows);
        (rows_to_map(&y, b, self.cout, ho, wo), rows)
    }

    /// `rows` is the gathered input cached by forward.
    pub fn backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        rows: &Array2<S>,
        dy: &Array4<S>,
    ) -> Array4<S> {
        let (b, _, ho, wo) = dy.dim();
        let p = self.patch;
        let dy_rows = map_to_rows(dy);
        let dx_rows = self.lin.backward(ps, rows, &dy_rows);
        let mut dx = Array4::zeros((b, self.cin, ho * p, wo * p));
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let r = (bi * ho + oy) * wo + ox;
                    for ci in 0..self.cin {
                        for ddy in 0..p {
                            for ddx in 0..p {
                                dx[[bi, ci, oy * p + ddy, ox * p + ddx]] =
                                    dx_rows[[r, ci * p * p + ddy * p + ddx]];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Transposed patch convolution: (B, Cin, H, W) -> (B, Cout, H*p, W*p).
#[derive(Debug, Clone, Copy)]
pub struct PatchDeconv {
    pub lin: Linear,
    pub patch: usize,
    pub cin: usize,
    pub cout: usize,
}

impl PatchDeconv {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        patch: usize,
        cin: usize,
        cout: usize,
        std: S,
        rng: &mut R,
    ) -> Self {
        let lin = Linear::init(
            ps,
            name,
            cin,
            cout * patch * patch,
            std,
            S::zero(),
            rng,
        );
        PatchDeconv {
            lin,
            patch,
            cin,
            cout,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: &Array4<S>,
    ) -> (Array4<S>, Array2<S>) {
        let (b, _, h, w) = x.dim();
        let p = self.patch;
        let rows = map_to_rows(x);
        let y_rows = self.lin.forward(ps, &rows); // (B*H*W, cout*p*p)
        let mut y = Array4::zeros((b, self.cout, h * p, w * p));
        for bi in 0..b {
            for iy in 0..h {
                for ix in 0..w {
                    let r = (bi * h + iy) * w + ix;
                    for co in 0..self.cout {
                        for dy in 0..p {
                            for dx in 0..p {
                                y[[bi, co, iy * p + dy, ix * p + dx]] =
                                    y_rows[[r, co * p * p + dy * p + dx]];
                            }
                        }
                    }
                }
            }
        }
        (y, rows)
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        rows: &Array2<S>,
        dy: &Array4<S>,
    ) -> Array4<S> {
        let (b, _, hp, wp) = dy.dim();
        let p = self.patch;
        let (h, w) = (hp / p, wp / p);
        let mut dy_rows = Array2::zeros((b * h * w, self.cout * p * p));
        for bi in 0..b {
            for iy in 0..h {
                for ix in 0..w {
                    let r = (bi * h + iy) * w + ix;
                    for co in 0..self.cout {
                        for ddy in 0..p {
                            for ddx in 0..p {
                                dy_rows[[r, co * p * p + ddy * p + ddx]] =
                                    dy[[bi, co, iy * p + ddy, ix * p + ddx]];
                            }
                        }
                    }
                }
            }
        }
        let dx_rows = self.lin.backward(ps, rows, &dy_rows);
        rows_to_map(&dx_rows, b, self.cin, h, w)
    }
}

// ─── layout helpers ──────────────────────────────────────────────────────────

/// (B, C, H, W) -> (B*H*W, C), positions major.
pub fn map_to_rows<S: Scalar>(x: &Array4<S>) -> Array2<S> {
    let (b, c, h, w) = x.dim();
    let mut rows = Array2::zeros((b * h * w, c));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    rows[[(bi * h + y) * w + xx, ci]] = x[[bi, ci, y, xx]];
                }
            }
        }
    }
    rows
}

/// (B*H*W, C) -> (B, C, H, W).
pub fn rows_to_map<S: Scalar>(rows: &Array2<S>, b: usize, c: usize, h: usize, w: usize) -> Array4<S> {
    let mut x = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    x[[bi, ci, y, xx]] = rows[[(bi * h + y) * w + xx, ci]];
                }
            }
        }
    }
    x
}

// ─── optimizer ───────────────────────────────────────────────────────────────

/// AdamW with decoupled weight decay.
pub struct AdamW<S> {
    m: Vec<ArrayD<S>>,
    v: Vec<ArrayD<S>>,
    t: usize,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub weight_decay: S,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(ps: &ParamStore<S>, beta1: S, weight_decay: S) -> Self {
        let m = ps
            .ids()
            .map(|id| ArrayD::zeros(ps.value(id).raw_dim()))
            .collect();
        let v = ps
            .ids()
            .map(|id| ArrayD::zeros(ps.value(id).raw_dim()))
            .collect();
        AdamW {
            m,
            v,
            t: 0,
            beta1,
            beta2: s(0.999),
            eps: s(1e-8),
            weight_decay,
        }
    }

    pub fn step(&mut self, ps: &mut ParamStore<S>, lr: S) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        for (i, e) in ps.entries.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut e.value)
                .and(&e.grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (S::one() - self.beta1) * g;
                    *v = self.beta2 * *v + (S::one() - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
                });
        }
    }
}

/// Cosine decay: `lr0 * (1 + cos(pi * t / total)) / 2`, clamped at `t = total`.
pub fn cosine_lr<S: Scalar>(lr0: S, t: usize, total: usize) -> S {
    let frac = (t.min(total) as f64) / (total.max(1) as f64);
    lr0 * s::<S>(0.5) * (S::one() + s::<S>((std::f64::consts::PI * frac).cos()))
}
