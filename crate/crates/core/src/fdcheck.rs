//! Central finite-difference harness used to verify every hand-written
//! backward pass and all analytic derivatives in this crate.

use crate::scalar::Scalar;
use ndarray::{Array1, Array2};

/// Central-difference gradient of a scalar function at `x`.
pub fn grad_fd<S: Scalar, F>(mut f: F, x: &[S], h: S) -> Vec<S>
where
    F: FnMut(&[S]) -> S,
{
    let mut xs = x.to_vec();
    let mut g = vec![S::zero(); x.len()];
    for i in 0..x.len() {
        let x0 = xs[i];
        xs[i] = x0 + h;
        let fp = f(&xs);
        xs[i] = x0 - h;
        let fm = f(&xs);
        xs[i] = x0;
        g[i] = (fp - fm) / (crate::scalar::s::<S>(2.0) * h);
    }
    g
}

/// Central-difference Jacobian of a vector map at `x` (rows index outputs).
pub fn jacobian_fd<S: Scalar, F>(mut f: F, x: &Array1<S>, h: S) -> Array2<S>
where
    F: FnMut(&Array1<S>) -> Array1<S>,
{
    let n = x.len();
    let m = f(x).len();
    let mut jac = Array2::zeros((m, n));
    let mut xs = x.clone();
    for j in 0..n {
        let x0 = xs[j];
        xs[j] = x0 + h;
        let fp = f(&xs);
        xs[j] = x0 - h;
        let fm = f(&xs);
        xs[j] = x0;
        for i in 0..m {
            jac[[i, j]] = (fp[i] - fm[i]) / (crate::scalar::s::<S>(2.0) * h);
        }
    }
    jac
}

/// Relative error with an absolute floor: |a-b| / max(floor, |a|, |b|).
pub fn rel_err<S: Scalar>(a: S, b: S, floor: S) -> S {
    let denom = floor.max(a.abs()).max(b.abs());
    (a - b).abs() / denom
}

/// Asserts an analytic gradient against central differences on a set of
/// coordinates. `floor` guards the relative error when both sides are tiny.
pub fn assert_grad_matches<S: Scalar>(
    analytic: &[S],
    numeric: &[S],
    coords: &[usize],
    tol: S,
    floor: S,
    what: &str,
) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    for &i in coords {
        let e = rel_err(analytic[i], numeric[i], floor);
        assert!(
            e <= tol,
            "{what}: coord {i}: analytic {} vs fd {} (rel err {})",
            analytic[i],
            numeric[i],
            e
        );
    }
}
