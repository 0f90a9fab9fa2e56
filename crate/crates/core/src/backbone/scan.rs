//! Selective scan: the input-dependent linear recurrence at the heart of
//! each backbone layer.
//!
//! Per channel `c` with diagonal state matrix `a[c]` (state size n):
//!
//! ```text
//! h_t = exp(delta_t[c] * a[c]) .* h_{t-1} + delta_t[c] * b_t * x_t[c]
//! y_t[c] = c_t . h_t
//! ```
//!
//! The zero-order-hold discretization keeps the step-by-step oracle cheap
//! and the recurrence strictly causal.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array2, Array3};

/// Input-dependent scan parameters for a sequence of length L over C channels
/// with state size n. `delta`, `b_proj`, `c_proj` are per-position values
/// (already projected from the input); `a_diag` is the per-channel diagonal
/// state transition.
#[derive(Debug, Clone)]
pub struct ScanParams<S> {
    /// (C, n) diagonal state matrix entries.
    pub a_diag: Array2<S>,
    /// (L, C) positive step sizes.
    pub delta: Array2<S>,
    /// (L, n) input projection.
    pub b_proj: Array2<S>,
    /// (L, n) output projection.
    pub c_proj: Array2<S>,
}

impl<S: Scalar> ScanParams<S> {
    pub fn validate(&self, seq_len: usize, channels: usize) -> Result<()> {
        let (c, n) = self.a_diag.dim();
        if c != channels {
            return Err(Error::Config(format!(
                "a_diag has {c} channels, expected {channels}"
            )));
        }
        if self.delta.dim() != (seq_len, channels) {
            return Err(Error::Config("delta shape mismatch".into()));
        }
        if self.b_proj.dim() != (seq_len, n) || self.c_proj.dim() != (seq_len, n) {
            return Err(Error::Config("b/c projection shape mismatch".into()));
        }
        for v in self
            .a_diag
            .iter()
            .chain(self.delta.iter())
            .chain(self.b_proj.iter())
            .chain(self.c_proj.iter())
        {
            if !v.is_finite() {
                return Err(Error::Numeric("non-finite scan parameter".into()));
            }
        }
        if self.delta.iter().any(|d| *d <= S::zero()) {
            return Err(Error::Numeric("delta must be positive".into()));
        }
        // discretized transition must stay finite
        for l in 0..seq_len {
            for ci in 0..channels {
                for k in 0..n {
                    if !(self.delta[[l, ci]] * self.a_diag[[ci, k]]).exp().is_finite() {
                        return Err(Error::Numeric("non-finite discretized transition".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Full scan workspace kept for the backward pass.
pub struct ScanCache<S> {
    /// (L, C, n) hidden states.
    pub h: Array3<S>,
    /// (L, C, n) discretized transitions exp(delta * a).
    pub e: Array3<S>,
}

/// Validated scan; returns the output sequence.
pub fn selective_scan<S: Scalar>(x: &Array2<S>, params: &ScanParams<S>) -> Result<Array2<S>> {
    let (l, c) = x.dim();
    if l < 1 {
        return Err(Error::Config("scan requires L >= 1".into()));
    }
    params.validate(l, c)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite scan input".into()));
    }
    Ok(scan_forward(x, params).0)
}

/// Discretized transitions exp(delta * a) for every (position, channel,
/// state). Direction-independent, so callers running several scan orders
/// compute this once and gather.
pub fn precompute_transitions<S: Scalar>(delta: &Array2<S>, a_diag: &Array2<S>) -> Array3<S> {
    let (l, c) = delta.dim();
    let n = a_diag.dim().1;
    let mut e = Array3::zeros((l, c, n));
    for t in 0..l {
        for ci in 0..c {
            let dt = delta[[t, ci]];
            for k in 0..n {
                e[[t, ci, k]] = (dt * a_diag[[ci, k]]).exp();
            }
        }
    }
    e
}

/// Unchecked scan returning output plus the cache needed by the backward pass.
pub fn scan_forward<S: Scalar>(x: &Array2<S>, params: &ScanParams<S>) -> (Array2<S>, ScanCache<S>) {
    let e = precompute_transitions(&params.delta, &params.a_diag);
    scan_forward_pre(x, params, e)
}

/// Scan with precomputed transitions (consumed into the cache).
pub fn scan_forward_pre<S: Scalar>(
    x: &Array2<S>,
    params: &ScanParams<S>,
    e: Array3<S>,
) -> (Array2<S>, ScanCache<S>) {
    let (l, c) = x.dim();
    let n = params.a_diag.dim().1;
    let mut h = Array3::zeros((l, c, n));
    let mut y = Array2::zeros((l, c));
    for t in 0..l {
        for ci in 0..c {
            let dt = params.delta[[t, ci]];
            let xv = x[[t, ci]] * dt;
            let mut acc = S::zero();
            for k in 0..n {
                let ek = e[[t, ci, k]];
                let prev = if t == 0 { S::zero() } else { h[[t - 1, ci, k]] };
                let hk = ek * prev + params.b_proj[[t, k]] * xv;
                h[[t, ci, k]] = hk;
                acc += params.c_proj[[t, k]] * hk;
            }
            y[[t, ci]] = acc;
        }
    }
    (y, ScanCache { h, e })
}

/// Gradients of the scan w.r.t. everything.
pub struct ScanGrads<S> {
    pub dx: Array2<S>,
    pub da: Array2<S>,
    pub ddelta: Array2<S>,
    pub db: Array2<S>,
    pub dc: Array2<S>,
}

pub fn scan_backward<S: Scalar>(
    x: &Array2<S>,
    params: &ScanParams<S>,
    cache: &ScanCache<S>,
    dy: &Array2<S>,
) -> ScanGrads<S> {
    let (l, c) = x.dim();
    let n = params.a_diag.dim().1;
    let mut dx = Array2::zeros((l, c));
    let mut da = Array2::zeros((c, n));
    let mut ddelta = Array2::zeros((l, c));
    let mut db = Array2::zeros((l, n));
    let mut dc = Array2::zeros((l, n));
    // running adjoint of h_t per (channel, state)
    let mut dh = Array2::<S>::zeros((c, n));
    let a = &params.a_diag;
    for t in (0..l).rev() {
        for ci in 0..c {
            let dt = params.delta[[t, ci]];
            let xv = x[[t, ci]];
            let dyv = dy[[t, ci]];
            let mut ddelta_acc = S::zero();
            let mut dx_acc = S::zero();
            for k in 0..n {
                let hk = cache.h[[t, ci, k]];
                let ek = cache.e[[t, ci, k]];
                let prev = if t == 0 { S::zero() } else { cache.h[[t - 1, ci, k]] };
                dc[[t, k]] += dyv * hk;
                let g = dh[[ci, k]] + dyv * params.c_proj[[t, k]];
                // h_t = e * h_{t-1} + delta * b * x
                ddelta_acc += g * (prev * a[[ci, k]] * ek + params.b_proj[[t, k]] * xv);
                da[[ci, k]] += g * prev * dt * ek;
                db[[t, k]] += g * dt * xv;
                dx_acc += g * dt * params.b_proj[[t, k]];
                dh[[ci, k]] = g * ek;
            }
            ddelta[[t, ci]] = ddelta_acc;
            dx[[t, ci]] = dx_acc;
        }
    }
    ScanGrads {
        dx,
        da,
        ddelta,
        db,
        dc,
    }
}
