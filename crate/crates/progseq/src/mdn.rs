//! Mixture-density output modelling: per-frame isotropic Gaussian
//! mixtures over the `3J+1` pose-and-counter vector, the stabilized
//! negative log-likelihood, and deterministic argmax-component
//! sampling.

use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::scalar::Scalar;

#[derive(Error, Debug)]
pub enum MdnError {
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("mixture weights must be a distribution, sum {0}")]
    BadWeights(f64),
    #[error("expected {expected} values, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Sigma floor applied during training so a memorized point cannot
/// push the likelihood to infinity.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Per-frame mixture parameters: `M` weights on the simplex, `M×D`
/// means, and `M` positive isotropic scales.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    weights: Vec<f64>,
    means: Vec<f64>,
    sigmas: Vec<f64>,
    dim: usize,
}

impl MixtureParams {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<f64>,
        sigmas: Vec<f64>,
        dim: usize,
    ) -> Result<Self, MdnError> {
        let m = weights.len();
        if means.len() != m * dim || sigmas.len() != m {
            return Err(MdnError::DimMismatch {
                expected: m * dim,
                got: means.len(),
            });
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(MdnError::BadWeights(sum));
        }
        for &s in &sigmas {
            if s <= 0.0 {
                return Err(MdnError::NonPositiveSigma(s));
            }
        }
        Ok(MixtureParams {
            weights,
            means,
            sigmas,
            dim,
        })
    }

    /// Applies the head activations to one frame's raw projections:
    /// softmax over the weight logits, exponential over the log
    /// scales. The constraints hold for any finite input.
    pub fn from_head_row(
        logits: &[f64],
        means: &[f64],
        log_sigmas: &[f64],
        dim: usize,
    ) -> Result<Self, MdnError> {
        let m = logits.len();
        if means.len() != m * dim || log_sigmas.len() != m {
            return Err(MdnError::DimMismatch {
                expected: m * dim,
                got: means.len(),
            });
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let norm: f64 = exps.iter().sum();
        let weights = exps.into_iter().map(|e| e / norm).collect();
        let sigmas = log_sigmas.iter().map(|&s| s.exp()).collect();
        MixtureParams::new(weights, means.to_vec(), sigmas, dim)
    }

    pub fn component_count(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn mean(&self, component: usize) -> &[f64] {
        &self.means[component * self.dim..(component + 1) * self.dim]
    }
}

/// Isotropic Gaussian density
/// `(2π σ²)^(-D/2) · exp(-‖y-μ‖² / (2σ²))`.
pub fn component_density(y: &[f64], mu: &[f64], sigma: f64, dim: usize) -> Result<f64, MdnError> {
    if sigma <= 0.0 {
        return Err(MdnError::NonPositiveSigma(sigma));
    }
    if y.len() != dim || mu.len() != dim {
        return Err(MdnError::DimMismatch {
            expected: dim,
            got: y.len(),
        });
    }
    let dist2: f64 = y.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    let norm = (2.0 * std::f64::consts::PI * sigma * sigma).powf(-(dim as f64) / 2.0);
    Ok(norm * (-dist2 / (2.0 * sigma * sigma)).exp())
}

/// Mixture density `Σ α_i φ_i(y)`.
pub fn mixture_probability(y: &[f64], params: &MixtureParams) -> Result<f64, MdnError> {
    let mut total = 0.0;
    for i in 0..params.component_count() {
        total += params.weights[i]
            * component_density(y, params.mean(i), params.sigmas[i], params.dim)?;
    }
    Ok(total)
}

/// Per-frame negative log-likelihood with log-sum-exp stabilization,
/// an underflow-safe evaluation path independent of the graph op.
pub fn nll_per_frame(y: &[f64], params: &MixtureParams) -> Result<f64, MdnError> {
    let d = params.dim as f64;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut terms = Vec::with_capacity(params.component_count());
    for i in 0..params.component_count() {
        let sigma = params.sigmas[i];
        if sigma <= 0.0 {
            return Err(MdnError::NonPositiveSigma(sigma));
        }
        let dist2: f64 = y
            .iter()
            .zip(params.mean(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        terms.push(
            params.weights[i].ln() - 0.5 * d * ln_2pi - d * sigma.ln()
                - dist2 / (2.0 * sigma * sigma),
        );
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    Ok(-lse)
}

/// Sum of per-frame NLL over a sequence (host-side evaluation).
pub fn mdn_nll_frames(frames: &[Vec<f64>], params: &[MixtureParams]) -> Result<f64, MdnError> {
    debug_assert_eq!(frames.len(), params.len());
    let mut total = 0.0;
    for (y, p) in frames.iter().zip(params) {
        total += nll_per_frame(y, p)?;
    }
    Ok(total)
}

/// Deterministic sample: the mean of the highest-weight component,
/// ties broken toward the lowest index. No stochastic perturbation is
/// applied (scale treated as zero at sampling time).
pub fn sample(params: &MixtureParams) -> Vec<f64> {
    let mut best = 0;
    for i in 1..params.component_count() {
        if params.weights[i] > params.weights[best] {
            best = i;
        }
    }
    params.mean(best).to_vec()
}

/// Graph-side NLL over head projections for one window slot; returns
/// the per-row NLL vector (masked rows contribute zero). Summing it
/// gives the sequence loss.
pub fn mdn_nll_rows<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    means: Var,
    log_sigmas: Var,
    targets: Arc<Vec<S>>,
    mask: Arc<Vec<bool>>,
    dim: usize,
) -> Result<Var, MdnError> {
    Ok(g.mdn_nll(
        logits,
        means,
        log_sigmas,
        targets,
        mask,
        dim,
        S::of_f64(SIGMA_FLOOR),
    )?)
}

/// Weighted combination of the mixture likelihood loss and the
/// adversarial generator term.
pub fn mdn_adversarial_loss(l_mdn: f64, l_g_adv: f64, lambda_mdn: f64, lambda_gan: f64) -> f64 {
    lambda_mdn * l_mdn + lambda_gan * l_g_adv
}
