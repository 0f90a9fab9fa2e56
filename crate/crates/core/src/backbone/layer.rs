//! One backbone layer: channelwise LayerNorm, four-directional cross-scan
//! selective state space mixing (SS2D), an output projection, and a residual
//! connection.

use crate::nn::{map_to_rows, rows_to_map, sigmoid, softplus, Linear, LayerNorm, LayerNormCache, ParamId, ParamStore};
use crate::scalar::{s, Scalar};
use ndarray::{Array2, Array4};
use rand::Rng;

use super::scan::{precompute_transitions, scan_backward, scan_forward_pre, ScanCache, ScanParams};

/// Scan traversal orders over an H x W grid. Each entry maps scan position
/// `i` to the flat spatial index `y * W + x`.
pub fn direction_orders(h: usize, w: usize) -> [Vec<usize>; 4] {
    let l = h * w;
    let row_major: Vec<usize> = (0..l).collect();
    let row_major_rev: Vec<usize> = (0..l).rev().collect();
    let col_major: Vec<usize> = (0..w)
        .flat_map(|x| (0..h).map(move |y| y * w + x))
        .collect();
    let col_major_rev: Vec<usize> = col_major.iter().rev().cloned().collect();
    [row_major, row_major_rev, col_major, col_major_rev]
}

/// Four directional selective scans of a single feature map, scattered back
/// to spatial positions and summed. `rows` is (H*W, C) position-major;
/// per-position parameters are shared across directions.
pub fn ss2d_merge<S: Scalar>(
    rows: &Array2<S>,
    a_diag: &Array2<S>,
    delta: &Array2<S>,
    b_proj: &Array2<S>,
    c_proj: &Array2<S>,
    h: usize,
    w: usize,
) -> (Array2<S>, Vec<ScanCache<S>>) {
    let (l, c) = rows.dim();
    debug_assert_eq!(l, h * w);
    let orders = direction_orders(h, w);
    // transitions are per-position; compute once and gather per direction
    let e_rows = precompute_transitions(delta, a_diag);
    let n = a_diag.dim().1;
    let mut merged = Array2::zeros((l, c));
    let mut caches = Vec::with_capacity(4);
    for order in orders.iter() {
        let seq_x = gather_rows(rows, order);
        let seq_delta = gather_rows(delta, order);
        let seq_b = gather_rows(b_proj, order);
        let seq_c = gather_rows(c_proj, order);
        let mut e_seq = ndarray::Array3::zeros((l, c, n));
        for (i, &pos) in order.iter().enumerate() {
            for ci in 0..c {
                for k in 0..n {
                    e_seq[[i, ci, k]] = e_rows[[pos, ci, k]];
                }
            }
        }
        let p = ScanParams {
            a_diag: a_diag.clone(),
            delta: seq_delta,
            b_proj: seq_b,
            c_proj: seq_c,
        };
        let (y_seq, cache) = scan_forward_pre(&seq_x, &p, e_seq);
        for (i, &pos) in order.iter().enumerate() {
            for ci in 0..c {
                merged[[pos, ci]] += y_seq[[i, ci]];
            }
        }
        caches.push(cache);
    }
    (merged, caches)
}

pub fn gather_rows<S: Scalar>(rows: &Array2<S>, order: &[usize]) -> Array2<S> {
    let c = rows.dim().1;
    let mut out = Array2::zeros((order.len(), c));
    for (i, &pos) in order.iter().enumerate() {
        out.row_mut(i).assign(&rows.row(pos));
    }
    out
}

/// One VMamba-style layer. All scan projections are shared across the four
/// directions, so a spatially constant input yields four identical scan
/// sequences.
pub struct VssLayer {
    pub norm: LayerNorm,
    pub w_delta: Linear,
    pub w_b: Linear,
    pub w_c: Linear,
    pub out_proj: Linear,
    pub a_diag: ParamId,
    pub channels: usize,
    pub state_dim: usize,
}

pub struct VssCache<S> {
    pub x: Array4<S>,
    pub ln: LayerNormCache<S>,
    pub xn_rows_per_sample: Vec<Array2<S>>,
    pub delta_pre: Array2<S>,
    pub delta: Array2<S>,
    pub b_rows: Array2<S>,
    pub c_rows: Array2<S>,
    /// per sample, per direction
    pub scans: Vec<Vec<ScanCache<S>>>,
    pub merged_rows: Array2<S>,
    pub hw: (usize, usize),
}

impl VssLayer {
    pub fn init<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        state_dim: usize,
        rng: &mut R,
    ) -> Self {
        let std = s::<S>(0.02);
        let norm = LayerNorm::init(ps, &format!("{name}.norm"), channels, S::one(), S::zero());
        let w_delta = Linear::init(
            ps,
            &format!("{name}.w_delta"),
            channels,
            channels,
            std,
            S::zero(),
            rng,
        );
        // per-channel step-size bias: softplus(bias) log-uniform in [1e-3, 1e-1]
        for v in ps.value_mut(w_delta.b).iter_mut() {
            let dt: f64 = rng.gen_range(1e-3f64.ln()..1e-1f64.ln());
            let dt = dt.exp();
            *v = crate::scalar::s::<S>(dt.exp_m1().ln()); // inverse softplus
        }
        let w_b = Linear::init(
            ps,
            &format!("{name}.w_b"),
            channels,
            state_dim,
            std,
            S::zero(),
            rng,
        );
        let w_c = Linear::init(
            ps,
            &format!("{name}.w_c"),
            channels,
            state_dim,
            std,
            S::zero(),
            rng,
        );
        let out_proj = Linear::init(
            ps,
            &format!("{name}.out_proj"),
            channels,
            channels,
            std,
            S::zero(),
            rng,
        );
        // A log-magnitudes uniform in [ln 0.5, ln 8); A = -exp(u) keeps the
        // discretized transition in (0, 1) for positive delta.
        let a = Array2::from_shape_fn((channels, state_dim), |_| {
            let u: f64 = rng.gen_range(0.5f64.ln()..8.0f64.ln());
            crate::scalar::s::<S>(-u.exp())
        });
        let a_diag = ps.add(format!("{name}.a_diag"), a.into_dyn());
        VssLayer {
            norm,
            w_delta,
            w_b,
            w_c,
            out_proj,
            a_diag,
            channels,
            state_dim,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: &Array4<S>,
    ) -> (Array4<S>, VssCache<S>) {
        let (b, c, h, w) = x.dim();
        let rows = map_to_rows(x);
        let (xn_rows, ln) = self.norm.forward(ps, &rows);
        let delta_pre = self.w_delta.forward(ps, &xn_rows);
        let delta = delta_pre.mapv(softplus);
        let b_rows = self.w_b.forward(ps, &xn_rows);
        let c_rows = self.w_c.forward(ps, &xn_rows);
        let a = ps
            .p2(self.a_diag)
            .to_owned();

        let l = h * w;
        let mut merged_rows = Array2::zeros((b * l, c));
        let mut scans = Vec::with_capacity(b);
        let mut xn_per_sample = Vec::with_capacity(b);
        for bi in 0..b {
            let sl = bi * l..(bi + 1) * l;
            let xn_s = xn_rows.slice(ndarray::s![sl.clone(), ..]).to_owned();
            let delta_s = delta.slice(ndarray::s![sl.clone(), ..]).to_owned();
            let b_s = b_rows.slice(ndarray::s![sl.clone(), ..]).to_owned();
            let c_s = c_rows.slice(ndarray::s![sl.clone(), ..]).to_owned();
            let (m, caches) = ss2d_merge(&xn_s, &a, &delta_s, &b_s, &c_s, h, w);
            merged_rows.slice_mut(ndarray::s![sl, ..]).assign(&m);
            scans.push(caches);
            xn_per_sample.push(xn_s);
        }
        let out_rows = self.out_proj.forward(ps, &merged_rows);
        let y = x + &rows_to_map(&out_rows, b, c, h, w);
        (
            y,
            VssCache {
                x: x.clone(),
                ln,
                xn_rows_per_sample: xn_per_sample,
                delta_pre,
                delta,
                b_rows,
                c_rows,
                scans,
                merged_rows,
                hw: (h, w),
            },
        )
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &mut ParamStore<S>,
        cache: &VssCache<S>,
        dy: &Array4<S>,
    ) -> Array4<S> {
        let (b, c, h, w) = dy.dim();
        let l = h * w;
        let dy_rows = map_to_rows(dy);
        let dmerged = self.out_proj.backward(ps, &cache.merged_rows, &dy_rows);

        let a = ps.p2(self.a_diag).to_owned();
        let orders = direction_orders(h, w);
        let mut dxn_rows = Array2::zeros((b * l, c));
        let mut ddelta_rows = Array2::zeros((b * l, c));
        let mut db_rows = Array2::zeros((b * l, self.state_dim));
        let mut dc_rows = Array2::zeros((b * l, self.state_dim));
        let mut da = Array2::zeros((c, self.state_dim));
        for bi in 0..b {
            let sl = bi * l..(bi + 1) * l;
            let dm = dmerged.slice(ndarray::s![sl.clone(), ..]).to_owned();
            let xn_s = &cache.xn_rows_per_sample[bi];
            let delta_s = cache.delta.slice(ndarray::s![sl.clone(), ..]).to_owned();
            let b_s = cache.b_rows.slice(ndarray::s![sl.clone(), ..]).to_owned();
            let c_s = cache.c_rows.slice(ndarray::s![sl.clone(), ..]).to_owned();
            for (dir, order) in orders.iter().enumerate() {
                let dy_seq = gather_rows(&dm, order);
                let p = ScanParams {
                    a_diag: a.clone(),
                    delta: gather_rows(&delta_s, order),
                    b_proj: gather_rows(&b_s, order),
                    c_proj: gather_rows(&c_s, order),
                };
                let seq_x = gather_rows(xn_s, order);
                let grads = scan_backward(&seq_x, &p, &cache.scans[bi][dir], &dy_seq);
                da += &grads.da;
                let mut dxn_s = dxn_rows.slice_mut(ndarray::s![sl.clone(), ..]);
                scatter_add_view(&mut dxn_s, &grads.dx, order);
                let mut dd_s = ddelta_rows.slice_mut(ndarray::s![sl.clone(), ..]);
                scatter_add_view(&mut dd_s, &grads.ddelta, order);
                let mut db_s = db_rows.slice_mut(ndarray::s![sl.clone(), ..]);
                scatter_add_view(&mut db_s, &grads.db, order);
                let mut dc_s = dc_rows.slice_mut(ndarray::s![sl.clone(), ..]);
                scatter_add_view(&mut dc_s, &grads.dc, order);
            }
        }
        ps.acc_grad(self.a_diag, &da.into_dyn().view());

        // delta = softplus(delta_pre)
        let mut ddelta_pre = ddelta_rows;
        ddelta_pre.zip_mut_with(&cache.delta_pre, |g, p| *g *= sigmoid(*p));

        let xn_full = {
            let mut rows = Array2::zeros((b * l, c));
            for bi in 0..b {
                rows.slice_mut(ndarray::s![bi * l..(bi + 1) * l, ..])
                    .assign(&cache.xn_rows_per_sample[bi]);
            }
            rows
        };
        dxn_rows += &self.w_delta.backward(ps, &xn_full, &ddelta_pre);
        dxn_rows += &self.w_b.backward(ps, &xn_full, &db_rows);
        dxn_rows += &self.w_c.backward(ps, &xn_full, &dc_rows);

        let dx_rows = self.norm.backward(ps, &cache.ln, &dxn_rows);
        dy + &rows_to_map(&dx_rows, b, c, h, w)
    }
}

fn scatter_add_view<S: Scalar>(
    dst: &mut ndarray::ArrayViewMut2<'_, S>,
    src: &Array2<S>,
    order: &[usize],
) {
    for (i, &pos) in order.iter().enumerate() {
        for (d, sv) in dst.row_mut(pos).iter_mut().zip(src.row(i).iter()) {
            *d += *sv;
        }
    }
}
