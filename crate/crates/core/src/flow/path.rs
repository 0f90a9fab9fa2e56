//! Flow factorization: latent trajectories driven by potential gradients,
//! with per-step change-of-variables log-determinant corrections.

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use super::potential::Potential;

/// Singularity threshold for |det(I + Hessian)|.
pub const SINGULAR_DET_EPS: f64 = 1e-12;

/// Largest latent dimension for which the exact determinant path is allowed.
pub const MAX_EXACT_DET_DIM: usize = 16;

/// One latent point on a flow path.
#[derive(Debug, Clone)]
pub struct LatentState<S> {
    pub z: Array1<S>,
    pub step: usize,
    pub log_density: S,
}

impl<S: Scalar> LatentState<S> {
    pub fn new(z: Array1<S>, step: usize, log_density: S) -> Self {
        LatentState {
            z,
            step,
            log_density,
        }
    }

    pub fn validate(&self, max_step: usize) -> Result<()> {
        if self.step > max_step {
            return Err(Error::Config(format!(
                "latent step {} > {max_step}",
                self.step
            )));
        }
        if self.z.iter().any(|v| !v.is_finite()) || !self.log_density.is_finite() {
            return Err(Error::Numeric("non-finite latent state".into()));
        }
        Ok(())
    }
}

/// A factorized trajectory z_0 .. z_T with its log-determinant corrections.
#[derive(Debug, Clone)]
pub struct FlowPath<S> {
    pub states: Vec<LatentState<S>>,
    pub logdet_terms: Vec<S>,
    pub total_log_prob: S,
}

impl<S: Scalar> FlowPath<S> {
    /// Checks the structural invariants: steps are 0..T exactly once and the
    /// total log-probability decomposes as base density minus the sum of
    /// log-determinants.
    pub fn validate(&self) -> Result<()> {
        if self.states.is_empty() {
            return Err(Error::Config("empty flow path".into()));
        }
        if self.logdet_terms.len() + 1 != self.states.len() {
            return Err(Error::Config("logdet/state count mismatch".into()));
        }
        for (k, st) in self.states.iter().enumerate() {
            if st.step != k {
                return Err(Error::Config(format!(
                    "state {k} carries step {}",
                    st.step
                )));
            }
        }
        let sum: S = self.logdet_terms.iter().cloned().sum();
        let expect = self.states[0].log_density - sum;
        if (expect - self.total_log_prob).abs() > s(1e-9) {
            return Err(Error::Numeric(format!(
                "total log prob {} does not recompose (expected {})",
                self.total_log_prob, expect
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.logdet_terms.len()
    }

    pub fn endpoint(&self) -> &LatentState<S> {
        self.states.last().unwrap()
    }
}

/// Diagonal Gaussian conditional q(. | context) with mean and log-variance.
#[derive(Debug, Clone)]
pub struct GaussianCond<S> {
    pub mean: Array1<S>,
    pub logvar: Array1<S>,
}

impl<S: Scalar> GaussianCond<S> {
    pub fn log_pdf(&self, z: &ArrayView1<S>) -> S {
        let half = s::<S>(0.5);
        let ln2pi = s::<S>((2.0 * std::f64::consts::PI).ln());
        let mut acc = S::zero();
        for j in 0..z.len() {
            let lv = self.logvar[j];
            let d = z[j] - self.mean[j];
            acc = acc - half * (ln2pi + lv) - half * d * d / lv.exp();
        }
        acc
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<S> {
        Array1::from_shape_fn(self.mean.len(), |j| {
            self.mean[j] + (self.logvar[j] * s::<S>(0.5)).exp() * S::standard_normal(rng)
        })
    }

    /// KL(q || N(0, I)).
    pub fn kl_to_standard(&self) -> S {
        let half = s::<S>(0.5);
        let mut acc = S::zero();
        for j in 0..self.mean.len() {
            let lv = self.logvar[j];
            let m = self.mean[j];
            acc += half * (lv.exp() + m * m - S::one() - lv);
        }
        acc
    }
}

/// det of a small square matrix via LU with partial pivoting.
pub fn det_lu<S: Scalar>(m: &Array2<S>) -> S {
    let n = m.dim().0;
    debug_assert_eq!(m.dim().1, n);
    let mut a = m.clone();
    let mut det = S::one();
    for k in 0..n {
        let mut best = k;
        let mut best_abs = a[[k, k]].abs();
        for r in k + 1..n {
            if a[[r, k]].abs() > best_abs {
                best = r;
                best_abs = a[[r, k]].abs();
            }
        }
        if best != k {
            for c in 0..n {
                let tmp = a[[k, c]];
                a[[k, c]] = a[[best, c]];
                a[[best, c]] = tmp;
            }
            det = -det;
        }
        let piv = a[[k, k]];
        if piv == S::zero() {
            return S::zero();
        }
        det *= piv;
        for r in k + 1..n {
            let f = a[[r, k]] / piv;
            for c in k + 1..n {
                let v = a[[k, c]];
                a[[r, c]] = a[[r, c]] - f * v;
            }
        }
    }
    det
}

/// One posterior evolution step: z' = z + grad_z u(z, t), with the exact
/// log|det(I + Hessian_z u)| correction. Rejects near-singular steps.
pub fn evolve_posterior_step<S: Scalar, P: Potential<S>>(
    state: &LatentState<S>,
    potential: &P,
) -> Result<(LatentState<S>, S)> {
    let d = state.z.len();
    if d > MAX_EXACT_DET_DIM {
        return Err(Error::Config(format!(
            "latent dim {d} exceeds exact-determinant limit {MAX_EXACT_DET_DIM}"
        )));
    }
    let t = s::<S>(state.step as f64);
    let (gz, _) = potential.grad(&state.z.view(), t);
    let hess = potential.hessian_z(&state.z.view(), t);
    let mut m = hess;
    for j in 0..d {
        m[[j, j]] += S::one();
    }
    let det = det_lu(&m);
    if det.abs().as_f64() < SINGULAR_DET_EPS {
        return Err(Error::SingularFlow {
            step: state.step,
            det: det.as_f64(),
        });
    }
    let logdet = det.abs().ln();
    let z_next = &state.z + &gz;
    let next = LatentState {
        z: z_next,
        step: state.step + 1,
        log_density: state.log_density - logdet,
    };
    Ok((next, logdet))
}

/// Factorized posterior path log-probability: the base conditional
/// log q(z~_0 | z_0) transported through T potential-gradient steps by
/// change of variables. Returns the path and its total log-probability.
pub fn posterior_path_logprob<S: Scalar, P: Potential<S>>(
    base: &GaussianCond<S>,
    z_tilde0: &Array1<S>,
    potential: &P,
    steps: usize,
) -> Result<(FlowPath<S>, S)> {
    let base_lp = base.log_pdf(&z_tilde0.view());
    let mut states = vec![LatentState::new(z_tilde0.clone(), 0, base_lp)];
    let mut logdets = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (next, logdet) = evolve_posterior_step(states.last().unwrap(), potential)?;
        states.push(next);
        logdets.push(logdet);
    }
    let total = states.last().unwrap().log_density;
    let path = FlowPath {
        states,
        logdet_terms: logdets,
        total_log_prob: total,
    };
    path.validate()?;
    Ok((path, total))
}

// ─── density models for the prior flow ───────────────────────────────────────

/// Probability density with gradient and Hessian of its log.
pub trait DensityModel<S: Scalar> {
    fn log_density(&self, z: &ArrayView1<S>) -> S;
    fn grad_log_density(&self, z: &ArrayView1<S>) -> Array1<S>;
    fn hessian_log_density(&self, z: &ArrayView1<S>) -> Array2<S>;
}

/// Diagonal Gaussian density.
#[derive(Debug, Clone)]
pub struct DiagonalGaussian<S> {
    pub mean: Array1<S>,
    pub std: Array1<S>,
}

impl<S: Scalar> DiagonalGaussian<S> {
    pub fn standard(dim: usize) -> Self {
        DiagonalGaussian {
            mean: Array1::zeros(dim),
            std: Array1::from_elem(dim, S::one()),
        }
    }
}

impl<S: Scalar> DensityModel<S> for DiagonalGaussian<S> {
    fn log_density(&self, z: &ArrayView1<S>) -> S {
        let half = s::<S>(0.5);
        let ln2pi = s::<S>((2.0 * std::f64::consts::PI).ln());
        let mut acc = S::zero();
        for j in 0..z.len() {
            let sd = self.std[j];
            let d = (z[j] - self.mean[j]) / sd;
            acc = acc - half * ln2pi - sd.ln() - half * d * d;
        }
        acc
    }
    fn grad_log_density(&self, z: &ArrayView1<S>) -> Array1<S> {
        Array1::from_shape_fn(z.len(), |j| {
            -(z[j] - self.mean[j]) / (self.std[j] * self.std[j])
        })
    }
    fn hessian_log_density(&self, z: &ArrayView1<S>) -> Array2<S> {
        let d = z.len();
        let mut h = Array2::zeros((d, d));
        for j in 0..d {
            h[[j, j]] = -S::one() / (self.std[j] * self.std[j]);
        }
        h
    }
}

/// Factorized prior path: particles evolve under the diffusion potential
/// psi = -D log p (velocity -D grad log p), each conditional expressed by
/// change of variables with Jacobian I - D Hessian(log p). Optional
/// `decode_loglik(z, step)` terms add the per-step decoding likelihoods.
pub fn prior_path_logprob<S: Scalar, M: DensityModel<S>>(
    z_tilde0: &Array1<S>,
    density: &M,
    diffusion: S,
    steps: usize,
    decode_loglik: Option<&dyn Fn(&ArrayView1<S>, usize) -> S>,
) -> Result<(FlowPath<S>, S)> {
    if diffusion <= S::zero() {
        return Err(Error::Domain("diffusion coefficient must be > 0".into()));
    }
    let d = z_tilde0.len();
    if d > MAX_EXACT_DET_DIM {
        return Err(Error::Config(format!(
            "latent dim {d} exceeds exact-determinant limit {MAX_EXACT_DET_DIM}"
        )));
    }
    let base_lp = density.log_density(&z_tilde0.view());
    let mut states = vec![LatentState::new(z_tilde0.clone(), 0, base_lp)];
    let mut logdets = Vec::with_capacity(steps);
    let mut decode_total = decode_loglik.map_or(S::zero(), |f| f(&z_tilde0.view(), 0));
    for step in 0..steps {
        let cur = states.last().unwrap();
        let gradlog = density.grad_log_density(&cur.z.view());
        let hess = density.hessian_log_density(&cur.z.view());
        // z' = z - D grad log p(z); J = I - D H
        let mut m = hess.mapv(|v| -diffusion * v);
        for j in 0..d {
            m[[j, j]] += S::one();
        }
        let det = det_lu(&m);
        if det.abs().as_f64() < SINGULAR_DET_EPS {
            return Err(Error::SingularFlow {
                step,
                det: det.as_f64(),
            });
        }
        let logdet = det.abs().ln();
        let z_next = &cur.z - &gradlog.mapv(|v| diffusion * v);
        let next = LatentState {
            z: z_next,
            step: step + 1,
            log_density: cur.log_density - logdet,
        };
        if let Some(f) = decode_loglik {
            decode_total += f(&next.z.view(), step + 1);
        }
        states.push(next);
        logdets.push(logdet);
    }
    let endpoint_lp = states.last().unwrap().log_density;
    let total = endpoint_lp + decode_total;
    let path = FlowPath {
        states,
        logdet_terms: logdets,
        total_log_prob: endpoint_lp,
    };
    path.validate()?;
    Ok((path, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::jacobian_fd;
    use crate::flow::potential::{BoundPotential, PotentialMlp, QuadraticPotential};
    use crate::nn::ParamStore;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn det_lu_known_values() {
        let m = Array2::from_shape_vec((2, 2), vec![2.0f64, 1.0, 1.0, 3.0]).unwrap();
        assert!((det_lu(&m) - 5.0).abs() < 1e-14);
        let m = Array2::from_shape_vec((3, 3), vec![1.0f64, 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        assert!(det_lu(&m).abs() < 1e-12);
    }

    #[test]
    fn constant_potential_is_identity_flow() {
        // u constant: zero Q and b give zero gradient field
        let pot = QuadraticPotential {
            q: Array2::<f64>::zeros((3, 3)),
            b: Array1::zeros(3),
        };
        let st = LatentState::new(Array1::from(vec![0.3, -0.7, 1.1]), 0, -1.0);
        let (next, logdet) = evolve_posterior_step(&st, &pot).unwrap();
        assert_eq!(next.z, st.z);
        assert_eq!(logdet, 0.0);
        assert_eq!(next.step, 1);
        assert_eq!(next.log_density, st.log_density);
    }

    #[test]
    fn isotropic_quadratic_has_closed_form_logdet() {
        // u = (a/2) |z|^2 -> z' = (1+a) z, logdet = d ln|1+a|
        let d = 4;
        let a = 0.37f64;
        let pot = QuadraticPotential {
            q: Array2::eye(d) * a,
            b: Array1::zeros(d),
        };
        let z = Array1::from(vec![0.5, -1.0, 2.0, 0.1]);
        let st = LatentState::new(z.clone(), 0, 0.0);
        let (next, logdet) = evolve_posterior_step(&st, &pot).unwrap();
        for j in 0..d {
            assert!((next.z[j] - (1.0 + a) * z[j]).abs() < 1e-12);
        }
        assert!((logdet - d as f64 * (1.0f64 + a).ln()).abs() < 1e-12);
    }

    #[test]
    fn singular_step_is_rejected() {
        // a = -1 collapses the map
        let d = 2;
        let pot = QuadraticPotential {
            q: Array2::eye(d) * -1.0,
            b: Array1::zeros(d),
        };
        let st = LatentState::new(Array1::from(vec![0.2, 0.8]), 0, 0.0);
        assert!(matches!(
            evolve_posterior_step(&st, &pot),
            Err(Error::SingularFlow { .. })
        ));
    }

    #[test]
    fn mlp_logdet_matches_fd_jacobian_at_d3() {
        let mut rng = stream(71, "logdet");
        let mut ps = ParamStore::<f64>::new();
        let mlp = PotentialMlp::init(&mut ps, "u", 4, &[8, 8], 0.45, &mut rng);
        let bound = BoundPotential {
            mlp: &mlp,
            ps: &ps,
            time_scale: 1.0,
        };
        for case in 0..10 {
            let z = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
            let st = LatentState::new(z.clone(), 0, 0.0);
            let (_, logdet) = evolve_posterior_step(&st, &bound).unwrap();
            // finite-difference Jacobian of the map g(z) = z + grad u(z)
            let jac = jacobian_fd(
                |zz| {
                    let (g, _) = bound.grad(&zz.view(), 0.0);
                    zz + &g
                },
                &z,
                1e-5,
            );
            let det = det_lu(&jac);
            let fd_logdet = det.abs().ln();
            assert!(
                (logdet - fd_logdet).abs() <= 1e-4,
                "case {case}: {logdet} vs {fd_logdet}"
            );
        }
    }

    #[test]
    fn posterior_path_t0_is_base_conditional() {
        let base = GaussianCond {
            mean: Array1::from(vec![0.1, -0.2]),
            logvar: Array1::from(vec![-0.5, 0.3]),
        };
        let z0 = Array1::from(vec![0.4, 0.0]);
        let pot = QuadraticPotential {
            q: Array2::<f64>::zeros((2, 2)),
            b: Array1::zeros(2),
        };
        let (path, total) = posterior_path_logprob(&base, &z0, &pot, 0).unwrap();
        assert_eq!(path.steps(), 0);
        assert!((total - base.log_pdf(&z0.view())).abs() < 1e-14);
    }

    #[test]
    fn constant_potential_path_equals_t0_value() {
        let base = GaussianCond {
            mean: Array1::from(vec![0.1, -0.2]),
            logvar: Array1::from(vec![-0.5, 0.3]),
        };
        let z0 = Array1::from(vec![0.4, 0.0]);
        let pot = QuadraticPotential {
            q: Array2::<f64>::zeros((2, 2)),
            b: Array1::from(vec![0.7, -0.3]), // constant drift: identity Jacobian
        };
        let (_, t0) = posterior_path_logprob(&base, &z0, &pot, 0).unwrap();
        let (path, t4) = posterior_path_logprob(&base, &z0, &pot, 4).unwrap();
        assert!((t0 - t4).abs() < 1e-12);
        assert_eq!(path.steps(), 4);
        path.validate().unwrap();
    }

    #[test]
    fn gaussian_cond_kl_is_zero_for_standard() {
        let g = GaussianCond {
            mean: Array1::<f64>::zeros(5),
            logvar: Array1::zeros(5),
        };
        assert!(g.kl_to_standard().abs() < 1e-14);
    }

    #[test]
    fn prior_small_diffusion_variance_expansion() {
        // standard normal: one step scales z by (1 + D); sample variance after
        // the step matches sigma^2 + 2D within O(D^2)
        let mut rng = stream(72, "prior");
        let d_coef = 0.01;
        let density = DiagonalGaussian::<f64>::standard(1);
        let n = 20_000;
        let mut before = Vec::with_capacity(n);
        let mut after = Vec::with_capacity(n);
        for _ in 0..n {
            let z0 = Array1::from(vec![f64::standard_normal(&mut rng)]);
            let (path, _) = prior_path_logprob(&z0, &density, d_coef, 1, None).unwrap();
            before.push(z0[0]);
            after.push(path.endpoint().z[0]);
        }
        let var = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
        };
        let v0 = var(&before);
        let v1 = var(&after);
        // exact map z' = (1+D) z, so v1 = (1+D)^2 v0; heat linearization v0 + 2 D v0
        assert!(
            (v1 - v0 * (1.0 + 2.0 * d_coef)).abs() <= 1e-3 * v0,
            "v0 {v0} v1 {v1}"
        );
    }

    #[test]
    fn prior_includes_decode_terms() {
        let density = DiagonalGaussian::<f64>::standard(2);
        let z0 = Array1::from(vec![0.3, -0.4]);
        let decode = |_z: &ArrayView1<f64>, _step: usize| -0.5f64;
        let (_, total_without) = prior_path_logprob(&z0, &density, 0.1, 3, None).unwrap();
        let (_, total_with) =
            prior_path_logprob(&z0, &density, 0.1, 3, Some(&decode)).unwrap();
        // T+1 = 4 decode terms of -0.5
        assert!((total_with - (total_without - 2.0)).abs() < 1e-12);
    }
}
