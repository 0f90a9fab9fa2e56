//! Latent flow factorization: potentials, path evolution, change-of-variables
//! log-probabilities, and the particle-grid transport oracle.

pub mod grid;
pub mod path;
pub mod potential;

pub use grid::ParticleGrid;
pub use path::{
    det_lu, evolve_posterior_step, posterior_path_logprob, prior_path_logprob, DensityModel,
    DiagonalGaussian, FlowPath, GaussianCond, LatentState, MAX_EXACT_DET_DIM, SINGULAR_DET_EPS,
};
pub use potential::{
    BoundPotential, LinearPotential, MlpGradCache, Potential, PotentialMlp, QuadraticPotential,
    TapeMlp,
};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use ndarray::Array1;

/// The learned potential pair of one block: the flow potential u and the
/// external-force network (same architecture, value negated and squared by
/// the force evaluation).
pub struct PotentialPair {
    pub u_net: PotentialMlp,
    pub force_net: PotentialMlp,
}

impl PotentialPair {
    pub fn init<S: Scalar, R: rand::Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        name: &str,
        latent_dim: usize,
        hidden: &[usize],
        init_std: S,
        rng: &mut R,
    ) -> Self {
        let u_net = PotentialMlp::init(ps, &format!("{name}.u"), latent_dim + 1, hidden, init_std, rng);
        let force_net = PotentialMlp::init(
            ps,
            &format!("{name}.force"),
            latent_dim + 1,
            hidden,
            init_std,
            rng,
        );
        PotentialPair { u_net, force_net }
    }
}

/// Exact value and u-parameter gradients of the factorized posterior path
/// log-probability, computed symbolically on the autodiff tape (the
/// higher-order derivatives of the log-determinant terms are impractical to
/// hand-derive). Intended for verification and diagnostics at small latent
/// dimension; the training loss never consumes it.
pub fn posterior_path_logprob_grad<S: Scalar>(
    base: &GaussianCond<S>,
    z_tilde0: &Array1<S>,
    mlp: &PotentialMlp,
    ps: &ParamStore<S>,
    steps: usize,
    time_scale: S,
) -> Result<(S, Vec<(ParamId, Vec<S>)>)> {
    let d = z_tilde0.len();
    if d + 1 != mlp.in_dim {
        return Err(Error::Config(format!(
            "latent dim {d} incompatible with potential input {}",
            mlp.in_dim
        )));
    }
    let mut tape = Tape::<S>::new();
    let tmlp = mlp.to_tape(ps, &mut tape);
    let mut z: Vec<Var> = z_tilde0.iter().map(|v| tape.leaf(*v)).collect();
    let base_lp = tape.leaf(base.log_pdf(&z_tilde0.view()));
    let mut total = base_lp;
    for step in 0..steps {
        let tau = tape.leaf(crate::scalar::s::<S>(step as f64) * time_scale);
        let mut x = z.clone();
        x.push(tau);
        let u = tmlp.eval(&mut tape, &x);
        let g = tape.grad(u, &z);
        // Hessian rows via grad-of-grad
        let mut m: Vec<Vec<Var>> = Vec::with_capacity(d);
        for i in 0..d {
            let row = tape.grad(g[i], &z);
            m.push(row);
        }
        let one = tape.leaf(S::one());
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = tape.add(row[i], one);
        }
        let Some(logdet) = tape.logdet_abs(&m, SINGULAR_DET_EPS) else {
            return Err(Error::SingularFlow { step, det: 0.0 });
        };
        total = tape.sub(total, logdet);
        // z <- z + grad u
        z = z
            .iter()
            .zip(g.iter())
            .map(|(zi, gi)| tape.add(*zi, *gi))
            .collect();
    }
    let value = tape.value(total);
    let param_ids = mlp.param_ids();
    let param_vars = tmlp.param_vars();
    let mut grads = Vec::with_capacity(param_ids.len());
    for (id, vars) in param_ids.iter().zip(param_vars.iter()) {
        let gs = tape.grad(total, vars);
        grads.push((*id, gs.iter().map(|v| tape.value(*v)).collect()));
    }
    Ok((value, grads))
}
