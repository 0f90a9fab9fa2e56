//! DGFamba at desk scale: a miniature selective state space image classifier
//! whose per-layer state embeddings are style-randomized, mapped into a latent
//! flow space, and constrained by a Hamilton-Jacobi optimal-transport loss so
//! the learned representation is invariant to domain style.
//!
//! The crate is organized around the training pipeline:
//!
//! * [`backbone`] — miniature four-block VMamba-style encoder (cross-scan
//!   selective state space layers) with hand-written backward passes.
//! * [`style`] — feature-statistics style quantification, random style
//!   sampling, and adaptive instance normalization injection.
//! * [`vae`] — per-hook variational encoders mapping feature maps into the
//!   latent flow space.
//! * [`flow`] — potential-driven flow factorization: path evolution,
//!   change-of-variables log-densities, and exact Hessian log-determinants.
//! * [`hj`] — Hamilton-Jacobi residual, the PINN-style flow constraint loss,
//!   and Wasserstein-2 validation oracles (in [`ot`]).
//! * [`data`] — procedural four-domain shape dataset with disjoint style
//!   parameter ranges, plus deterministic on-disk persistence.
//! * [`trainer`] — leave-one-domain-out training, evaluation, the component
//!   ablation grid, and the factorization-step sweep.
//! * [`report`] — metrics tables, 2-D embedding exports, and plots.
//!
//! All numeric kernels are generic over the scalar type via [`Scalar`]
//! (`f32` or `f64`); the concrete aliases at the crate root fix `f64`, which
//! is what the training stack and the finite-difference verification use.

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod fdcheck;
pub mod fsio;
pub mod flow;
pub mod hj;
pub mod nn;
pub mod ot;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod style;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type for the full pipeline.
pub type Real = f64;

/// Feature map over the default scalar.
pub type FeatureMap = backbone::FeatureMap<Real>;
/// Style statistics over the default scalar.
pub type StyleStats = style::StyleStats<Real>;
/// Backbone model over the default scalar.
pub type Backbone = backbone::Backbone<Real>;
/// Parameter store over the default scalar.
pub type ParamStore = nn::ParamStore<Real>;
