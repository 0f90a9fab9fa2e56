//! Style quantification and injection for state embeddings: per-channel
//! spatial statistics, uniform random target styles, and adaptive instance
//! renormalization of feature maps.

use crate::scalar::{s, Scalar};
use ndarray::{Array1, Array2, Array4};
use rand::Rng;

/// Denominator guard for degenerate (zero) channel deviations.
pub const STYLE_EPS: f64 = 1e-5;

/// Per-sample, per-channel style coordinates of a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleStats<S> {
    /// (batch, channels) means.
    pub mu: Array2<S>,
    /// (batch, channels) standard deviations (population), non-negative.
    pub sigma: Array2<S>,
}

impl<S: Scalar> StyleStats<S> {
    pub fn channels(&self) -> usize {
        self.mu.dim().1
    }
}

/// Per-channel mean and population standard deviation over spatial positions,
/// computed in two passes.
pub fn compute_style_stats<S: Scalar>(f: &Array4<S>) -> StyleStats<S> {
    let (b, c, h, w) = f.dim();
    let n = s::<S>((h * w) as f64);
    let mut mu = Array2::zeros((b, c));
    let mut sigma = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = S::zero();
            for y in 0..h {
                for x in 0..w {
                    acc += f[[bi, ci, y, x]];
                }
            }
            let m = acc / n;
            mu[[bi, ci]] = m;
            let mut var = S::zero();
            for y in 0..h {
                for x in 0..w {
                    let d = f[[bi, ci, y, x]] - m;
                    var += d * d;
                }
            }
            sigma[[bi, ci]] = (var / n).sqrt();
        }
    }
    StyleStats { mu, sigma }
}

/// One random style: each coordinate i.i.d. uniform on [0, 1].
pub fn sample_style<S: Scalar, R: Rng + ?Sized>(channels: usize, rng: &mut R) -> (Array1<S>, Array1<S>) {
    let mu = Array1::from_shape_fn(channels, |_| S::uniform(rng, S::zero(), S::one()));
    let sigma = Array1::from_shape_fn(channels, |_| S::uniform(rng, S::zero(), S::one()));
    (mu, sigma)
}

/// Random styles for a whole batch.
pub fn sample_style_batch<S: Scalar, R: Rng + ?Sized>(
    batch: usize,
    channels: usize,
    rng: &mut R,
) -> StyleStats<S> {
    let mut mu = Array2::zeros((batch, channels));
    let mut sigma = Array2::zeros((batch, channels));
    for bi in 0..batch {
        let (m, sg) = sample_style::<S, R>(channels, rng);
        mu.row_mut(bi).assign(&m);
        sigma.row_mut(bi).assign(&sg);
    }
    StyleStats { mu, sigma }
}

/// Adaptive instance renormalization:
/// `target.sigma * (f - original.mu) / (original.sigma + eps) + target.mu`,
/// per sample and channel over spatial positions.
pub fn stylize<S: Scalar>(
    f: &Array4<S>,
    original: &StyleStats<S>,
    target: &StyleStats<S>,
) -> Array4<S> {
    let (b, c, h, w) = f.dim();
    assert_eq!(original.mu.dim(), (b, c), "original stats shape mismatch");
    assert_eq!(target.mu.dim(), (b, c), "target stats shape mismatch");
    let eps = s::<S>(STYLE_EPS);
    let mut out = f.clone();
    for bi in 0..b {
        for ci in 0..c {
            let mu = original.mu[[bi, ci]];
            let denom = original.sigma[[bi, ci]] + eps;
            let tm = target.mu[[bi, ci]];
            let ts = target.sigma[[bi, ci]];
            for y in 0..h {
                for x in 0..w {
                    let v = out[[bi, ci, y, x]];
                    out[[bi, ci, y, x]] = ts * (v - mu) / denom + tm;
                }
            }
        }
    }
    out
}

/// Backward of `stylize` w.r.t. `f`, when `original` was computed from `f`
/// itself (the training configuration) and `target` is a constant sample.
pub fn stylize_backward<S: Scalar>(
    f: &Array4<S>,
    original: &StyleStats<S>,
    target: &StyleStats<S>,
    dy: &Array4<S>,
) -> Array4<S> {
    let (b, c, h, w) = f.dim();
    let n = s::<S>((h * w) as f64);
    let eps = s::<S>(STYLE_EPS);
    let tiny = s::<S>(1e-12);
    let mut dx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let mu = original.mu[[bi, ci]];
            let sg = original.sigma[[bi, ci]];
            let denom = sg + eps;
            let ts = target.sigma[[bi, ci]];
            let mut dy_sum = S::zero();
            let mut dy_dot_d = S::zero();
            for y in 0..h {
                for x in 0..w {
                    let g = dy[[bi, ci, y, x]];
                    dy_sum += g;
                    dy_dot_d += g * (f[[bi, ci, y, x]] - mu);
                }
            }
            let dy_mean = dy_sum / n;
            let sigma_coef = if sg > tiny {
                ts * dy_dot_d / (denom * denom * n * sg)
            } else {
                S::zero()
            };
            for y in 0..h {
                for x in 0..w {
                    let g = dy[[bi, ci, y, x]];
                    let d = f[[bi, ci, y, x]] - mu;
                    dx[[bi, ci, y, x]] = ts * (g - dy_mean) / denom - sigma_coef * d;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::{grad_fd, rel_err};
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn constant_channels_have_zero_sigma() {
        let f = Array4::from_elem((2, 3, 4, 4), 0.3f64);
        let st = compute_style_stats(&f);
        for v in st.mu.iter() {
            assert!((v - 0.3).abs() < 1e-12);
        }
        for v in st.sigma.iter() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn two_point_channel_stats() {
        // values {0, 1} in equal proportion -> mu 0.5, sigma 0.5
        let mut f = Array4::<f64>::zeros((1, 1, 2, 4));
        for x in 0..4 {
            f[[0, 0, 0, x]] = 1.0;
        }
        let st = compute_style_stats(&f);
        assert!((st.mu[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((st.sigma[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn stats_match_bruteforce_oracle() {
        let mut rng = stream(41, "stats");
        let f = Array4::from_shape_fn((3, 4, 5, 6), |_| rng.gen_range(-3.0..3.0));
        let st = compute_style_stats(&f);
        let (b, c, h, w) = f.dim();
        for bi in 0..b {
            for ci in 0..c {
                // independent oracle: accumulate into Vec, then two explicit passes
                let vals: Vec<f64> = (0..h)
                    .flat_map(|y| (0..w).map(move |x| (y, x)))
                    .map(|(y, x)| f[[bi, ci, y, x]])
                    .collect();
                let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
                let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
                assert!((st.mu[[bi, ci]] - m).abs() < 1e-6);
                assert!((st.sigma[[bi, ci]] - v.sqrt()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_in_unit_interval() {
        let (m1, s1) = sample_style::<f64, _>(16, &mut stream(42, "style"));
        let (m2, s2) = sample_style::<f64, _>(16, &mut stream(42, "style"));
        assert_eq!(m1, m2);
        assert_eq!(s1, s2);
        for v in m1.iter().chain(s1.iter()) {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn sampling_mean_obeys_law_of_large_numbers() {
        let mut rng = stream(43, "lln");
        let n = 100_000;
        let mut acc = 0.0f64;
        for _ in 0..n {
            let (m, _) = sample_style::<f64, _>(1, &mut rng);
            acc += m[0];
        }
        let mean = acc / n as f64;
        assert!((0.49..=0.51).contains(&mean), "mean {mean}");
    }

    #[test]
    fn stylize_identity_when_target_equals_original() {
        let mut rng = stream(44, "ident");
        // sigma >> eps
        let f = Array4::from_shape_fn((2, 3, 4, 4), |_| rng.gen_range(-4.0..4.0));
        let st = compute_style_stats(&f);
        let out = stylize(&f, &st, &st);
        let (b, c, h, w) = f.dim();
        for bi in 0..b {
            for ci in 0..c {
                let scale = st.sigma[[bi, ci]];
                for y in 0..h {
                    for x in 0..w {
                        let (a, v): (f64, f64) = (out[[bi, ci, y, x]], f[[bi, ci, y, x]]);
                        assert!(
                            (a - v).abs() <= 1e-5 * (v.abs() + scale),
                            "{a} vs {v} at sigma {scale}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn stylize_zero_target_sigma_gives_constant_channels() {
        let mut rng = stream(45, "degen");
        let f = Array4::from_shape_fn((1, 2, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let orig = compute_style_stats(&f);
        let target = StyleStats {
            mu: Array2::from_elem((1, 2), 0.7f64),
            sigma: Array2::zeros((1, 2)),
        };
        let out = stylize(&f, &orig, &target);
        for v in out.iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn stat_matching_on_100_random_maps() {
        let mut rng = stream(46, "match");
        for _ in 0..100 {
            let f = Array4::from_shape_fn((1, 3, 6, 6), |_| rng.gen_range(-2.0..2.0));
            let orig = compute_style_stats(&f);
            // regenerate until sigma > 1e-3 (random maps essentially always pass)
            assert!(orig.sigma.iter().all(|v| *v > 1e-3));
            let target = sample_style_batch::<f64, _>(1, 3, &mut rng);
            let out = stylize(&f, &orig, &target);
            let got = compute_style_stats(&out);
            for (a, b) in got.mu.iter().zip(target.mu.iter()) {
                assert!((a - b).abs() <= 1e-4, "mu {a} vs {b}");
            }
            for (a, b) in got.sigma.iter().zip(target.sigma.iter()) {
                assert!((a - b).abs() <= 1e-4, "sigma {a} vs {b}");
            }
        }
    }

    #[test]
    fn restylizing_recovers_original_stats() {
        let mut rng = stream(47, "idem");
        for _ in 0..20 {
            let f = Array4::from_shape_fn((1, 2, 5, 5), |_| rng.gen_range(-2.0..2.0));
            let s0 = compute_style_stats(&f);
            // keep the intermediate sigma clear of the eps guard
            let mut t = sample_style_batch::<f64, _>(1, 2, &mut rng);
            t.sigma.mapv_inplace(|v| v.max(0.2));
            let g = stylize(&f, &s0, &t);
            let t_actual = compute_style_stats(&g);
            let back = stylize(&g, &t_actual, &s0);
            let s_back = compute_style_stats(&back);
            for (a, b) in s_back.mu.iter().zip(s0.mu.iter()) {
                assert!((a - b).abs() < 2e-4);
            }
            for (a, b) in s_back.sigma.iter().zip(s0.sigma.iter()) {
                assert!((a - b).abs() < 2e-4);
            }
        }
    }

    #[test]
    fn stylize_backward_matches_fd() {
        let mut rng = stream(48, "stygrad");
        let f = Array4::from_shape_fn((1, 2, 3, 4), |_| rng.gen_range(-1.0..1.0));
        let target = sample_style_batch::<f64, _>(1, 2, &mut rng);
        let wgt = Array4::from_shape_fn(f.dim(), |_| rng.gen_range(-1.0..1.0));
        let orig = compute_style_stats(&f);
        let dx = stylize_backward(&f, &orig, &target, &wgt);
        let flat: Vec<f64> = f.iter().cloned().collect();
        let g_fd = grad_fd(
            |v| {
                let ff = Array4::from_shape_vec(f.dim(), v.to_vec()).unwrap();
                let st = compute_style_stats(&ff);
                (&stylize(&ff, &st, &target) * &wgt).sum()
            },
            &flat,
            1e-6,
        );
        for (a, b) in dx.iter().zip(g_fd.iter()) {
            assert!(rel_err(*a, *b, 1e-6) < 1e-4, "{a} vs {b}");
        }
    }
}
