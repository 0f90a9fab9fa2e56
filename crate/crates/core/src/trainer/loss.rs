//! Loss composition: classification plus per-hook HJ totals plus weighted
//! auxiliary VAE terms.

use crate::hj::HjLossTerms;
use crate::nn::cross_entropy;
use crate::scalar::Scalar;
use ndarray::Array2;

/// Auxiliary VAE losses, already averaged over hooks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeTerms<S> {
    pub recon: S,
    pub kl: S,
}

impl<S: Scalar> VaeTerms<S> {
    pub fn zero() -> Self {
        VaeTerms {
            recon: S::zero(),
            kl: S::zero(),
        }
    }
}

/// Logged loss components of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts<S> {
    pub ce: S,
    pub hj: S,
    pub recon: S,
    pub kl: S,
    pub total: S,
}

/// The combined objective:
/// `cross_entropy + sum(hj totals) + lambda_recon * recon + lambda_kl * kl`.
pub fn total_loss<S: Scalar>(
    logits: &Array2<S>,
    labels: &[usize],
    hj_terms: &[HjLossTerms<S>],
    vae_terms: &VaeTerms<S>,
    lambda_recon: S,
    lambda_kl: S,
) -> S {
    let (ce, _) = cross_entropy(logits, labels);
    let hj: S = hj_terms.iter().map(|t| t.total).sum();
    ce + hj + lambda_recon * vae_terms.recon + lambda_kl * vae_terms.kl
}
