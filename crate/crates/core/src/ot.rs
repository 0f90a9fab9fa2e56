//! Wasserstein-2 validation oracles: the isotropic-Gaussian closed form and
//! an exact assignment solver for equal-size point clouds. These exist to
//! validate the flow constraint; they are never part of a training loss.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2};

/// A transport problem between two distributions with quadratic cost.
#[derive(Debug, Clone)]
pub enum TransportProblem<S> {
    /// Isotropic Gaussians (mean, std) -> (mean, std).
    Gaussian {
        mean0: Array1<S>,
        std0: S,
        mean1: Array1<S>,
        std1: S,
    },
    /// Equal-cardinality point clouds with uniform weights, rows are points.
    Clouds { x: Array2<S>, y: Array2<S> },
}

/// Closed-form W2 between isotropic Gaussians:
/// `sqrt(|m0 - m1|^2 + d * (s0 - s1)^2)`.
pub fn w2_gaussian_oracle<S: Scalar>(p: &TransportProblem<S>) -> Result<S> {
    match p {
        TransportProblem::Gaussian {
            mean0,
            std0,
            mean1,
            std1,
        } => {
            if *std0 <= S::zero() || *std1 <= S::zero() {
                return Err(Error::Domain("Gaussian std must be positive".into()));
            }
            if mean0.len() != mean1.len() {
                return Err(Error::Domain("Gaussian dimension mismatch".into()));
            }
            let d = crate::scalar::s::<S>(mean0.len() as f64);
            let dm: S = mean0
                .iter()
                .zip(mean1.iter())
                .map(|(a, b)| (*a - *b) * (*a - *b))
                .sum();
            let ds = *std0 - *std1;
            Ok((dm + d * ds * ds).sqrt())
        }
        TransportProblem::Clouds { .. } => Err(Error::Domain(
            "w2_gaussian_oracle requires a Gaussian pair".into(),
        )),
    }
}

/// Exact discrete W2 between equal-size clouds:
/// `sqrt(min over assignments of mean squared pairwise distance)`.
pub fn w2_discrete_oracle<S: Scalar>(p: &TransportProblem<S>) -> Result<S> {
    match p {
        TransportProblem::Clouds { x, y } => {
            let (n, d) = x.dim();
            let (m, d2) = y.dim();
            if n != m {
                return Err(Error::Domain(format!(
                    "cloud sizes differ: {n} vs {m}"
                )));
            }
            if d != d2 {
                return Err(Error::Domain("cloud dimensions differ".into()));
            }
            if n == 0 {
                return Err(Error::Domain("empty clouds".into()));
            }
            if n > 512 {
                return Err(Error::Domain(format!("cloud size {n} exceeds 512")));
            }
            let mut cost = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0f64;
                    for k in 0..d {
                        let diff = (x[[i, k]] - y[[j, k]]).as_f64();
                        acc += diff * diff;
                    }
                    cost[[i, j]] = acc;
                }
            }
            let (_, total) = solve_assignment(&cost);
            Ok(crate::scalar::s::<S>((total / n as f64).sqrt()))
        }
        TransportProblem::Gaussian { .. } => Err(Error::Domain(
            "w2_discrete_oracle requires point clouds".into(),
        )),
    }
}

/// Shortest-augmenting-path solver for the square assignment problem
/// (Jonker-Volgenant / Hungarian, O(n^3)). Returns the column assigned to
/// each row and the optimal total cost.
pub fn solve_assignment(cost: &Array2<f64>) -> (Vec<usize>, f64) {
    let n = cost.dim().0;
    assert_eq!(cost.dim().1, n, "assignment requires a square cost matrix");
    // 1-based internally; row 0 and column 0 are virtual.
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    let total = (0..n).map(|i| cost[[i, row_to_col[i]]]).sum();
    (row_to_col, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn gauss(m0: Vec<f64>, s0: f64, m1: Vec<f64>, s1: f64) -> TransportProblem<f64> {
        TransportProblem::Gaussian {
            mean0: Array1::from(m0),
            std0: s0,
            mean1: Array1::from(m1),
            std1: s1,
        }
    }

    #[test]
    fn gaussian_oracle_identity_and_translation() {
        let p = gauss(vec![0.3, -0.5], 1.2, vec![0.3, -0.5], 1.2);
        assert_eq!(w2_gaussian_oracle(&p).unwrap(), 0.0);
        let p = gauss(vec![0.0, 0.0], 1.0, vec![3.0, 4.0], 1.0);
        assert!((w2_gaussian_oracle(&p).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_oracle_closed_form_case() {
        // d = 2, s0 = 1, s1 = 2, |dm| = 5 -> W2^2 = 25 + 2 = 27
        let p = gauss(vec![0.0, 0.0], 1.0, vec![3.0, 4.0], 2.0);
        let w = w2_gaussian_oracle(&p).unwrap();
        assert!((w * w - 27.0).abs() < 1e-10);
    }

    #[test]
    fn gaussian_oracle_rejects_bad_std() {
        let p = gauss(vec![0.0], 0.0, vec![1.0], 1.0);
        assert!(matches!(w2_gaussian_oracle(&p), Err(Error::Domain(_))));
    }

    #[test]
    fn discrete_oracle_trivial_cases() {
        let x = Array2::from_shape_vec((3, 2), vec![0., 0., 1., 1., 2., 0.]).unwrap();
        let p = TransportProblem::Clouds {
            x: x.clone(),
            y: x.clone(),
        };
        assert!(w2_discrete_oracle(&p).unwrap() < 1e-12);
        // single points x, y -> |x - y|
        let p = TransportProblem::Clouds {
            x: Array2::from_shape_vec((1, 2), vec![1.0f64, 2.0]).unwrap(),
            y: Array2::from_shape_vec((1, 2), vec![4.0, 6.0]).unwrap(),
        };
        assert!((w2_discrete_oracle(&p).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn discrete_oracle_rejects_size_mismatch() {
        let p = TransportProblem::Clouds {
            x: Array2::<f64>::zeros((2, 2)),
            y: Array2::zeros((3, 2)),
        };
        assert!(matches!(w2_discrete_oracle(&p), Err(Error::Domain(_))));
    }

    /// Brute-force assignment by permutation enumeration.
    fn brute_force(cost: &Array2<f64>) -> f64 {
        let n = cost.dim().0;
        let mut idx: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut idx, 0, &mut |perm| {
            let total: f64 = (0..n).map(|i| cost[[i, perm[i]]]).sum();
            if total < best {
                best = total;
            }
        });
        best
    }

    fn permute(idx: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == idx.len() {
            f(idx);
            return;
        }
        for i in k..idx.len() {
            idx.swap(k, i);
            permute(idx, k + 1, f);
            idx.swap(k, i);
        }
    }

    #[test]
    fn assignment_matches_bruteforce() {
        let mut rng = stream(51, "lap");
        for _ in 0..30 {
            let n = rng.gen_range(1..=7);
            let cost = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..10.0));
            let (asg, total) = solve_assignment(&cost);
            // valid permutation
            let mut seen = vec![false; n];
            for &c in &asg {
                assert!(!seen[c]);
                seen[c] = true;
            }
            let expect = brute_force(&cost);
            assert!(
                (total - expect).abs() < 1e-9,
                "n={n}: {total} vs {expect}"
            );
        }
    }

    #[test]
    fn discrete_w2_is_symmetric_and_triangular() {
        let mut rng = stream(52, "metric");
        for _ in 0..10 {
            let n = 12;
            let d = 3;
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0))
            };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let w = |x: &Array2<f64>, y: &Array2<f64>| {
                w2_discrete_oracle(&TransportProblem::Clouds {
                    x: x.clone(),
                    y: y.clone(),
                })
                .unwrap()
            };
            let ab = w(&a, &b);
            let ba = w(&b, &a);
            assert!((ab - ba).abs() < 1e-9, "symmetry");
            let bc = w(&b, &c);
            let ac = w(&a, &c);
            assert!(ac <= ab + bc + 1e-9, "triangle: {ac} > {ab} + {bc}");
        }
    }
}
