//! Spike-and-slab and zero-mean Gaussian PAC-Bayes machinery: KL terms,
//! expected sharpness restricted to unpruned weights, the variational KL
//! bound and posterior-variance optimization.
//!
//! Standard deviations are used throughout (`σ`, not `σ²`).

mod optimize;
mod risk;

pub use optimize::{
    evaluate_bound, kl_risk_scatter, optimize_posterior_sigma, write_scatter_csv, BoundConfig,
    BoundReport, PosteriorFamily, ScatterInput, ScatterRow, SigmaOutcome,
};
pub use risk::{
    expected_sharpness, perturbed_risk, sample_perturbation, RiskEstimate, RiskLoss, Risks,
};

use crate::error::{Error, Result};
use crate::masking::{PruningMask, Scope};
use crate::nn::ParamVector;

#[derive(Clone, Debug, PartialEq)]
pub struct SpikeSlabPrior {
    /// Slab mean, normally `θ_init`.
    pub mean: ParamVector,
    pub sigma: Vec<f64>,
    /// Slab (keep) probability λ_p.
    pub lambda: f64,
}

impl SpikeSlabPrior {
    pub fn new(mean: ParamVector, sigma: Vec<f64>, lambda: f64) -> Result<Self> {
        if sigma.len() != mean.len() {
            return Err(Error::shape("prior sigma", mean.len(), sigma.len()));
        }
        positive(&sigma, "prior sigma")?;
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::invalid(format!("lambda_p must be in (0, 1), got {lambda}")));
        }
        Ok(SpikeSlabPrior { mean, sigma, lambda })
    }

    /// Scalar σ_p with λ_p = 1 − β for target sparsity β.
    pub fn for_target_sparsity(mean: ParamVector, sigma_p: f64, target_sparsity: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, vec![sigma_p; n], 1.0 - target_sparsity)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpikeSlabPosterior {
    /// `θ̄`, zero at masked coordinates.
    pub mean: ParamVector,
    /// Slab std; only entries at kept coordinates are meaningful.
    pub sigma: Vec<f64>,
    pub mask: PruningMask,
}

impl SpikeSlabPosterior {
    /// Zeroes `mean` at masked coordinates.
    pub fn new(mean: &ParamVector, sigma: Vec<f64>, mask: PruningMask) -> Result<Self> {
        if sigma.len() != mean.len() {
            return Err(Error::shape("posterior sigma", mean.len(), sigma.len()));
        }
        let kept: Vec<f64> = (0..sigma.len())
            .filter(|&i| mask.is_kept(i))
            .map(|i| sigma[i])
            .collect();
        positive(&kept, "posterior sigma")?;
        Ok(SpikeSlabPosterior {
            mean: mask.apply(mean)?,
            sigma,
            mask,
        })
    }

    /// Noise std per coordinate: σ_q on kept in-scope coordinates, 0 elsewhere.
    pub fn noise_std(&self, scope: Scope) -> Vec<f64> {
        (0..self.sigma.len())
            .map(|i| {
                if self.mask.is_kept(i) && self.mask.in_scope(scope, i) {
                    self.sigma[i]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Diagonal Gaussian posterior against the prior `N(0, σ_p² I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: ParamVector,
    pub sigma: Vec<f64>,
    pub sigma_p: f64,
    /// Coordinates treated as random; the rest are fixed.
    pub support: Vec<bool>,
}

impl GaussianPosterior {
    pub fn new(mean: ParamVector, sigma: Vec<f64>, sigma_p: f64) -> Result<Self> {
        let support = vec![true; mean.len()];
        Self::with_support(mean, sigma, sigma_p, support)
    }

    pub fn with_support(mean: ParamVector, sigma: Vec<f64>, sigma_p: f64, support: Vec<bool>) -> Result<Self> {
        if sigma.len() != mean.len() || support.len() != mean.len() {
            return Err(Error::shape("gaussian posterior", mean.len(), sigma.len()));
        }
        positive(&sigma, "posterior sigma")?;
        positive(&[sigma_p], "prior sigma")?;
        Ok(GaussianPosterior {
            mean,
            sigma,
            sigma_p,
            support,
        })
    }

    pub fn noise_std(&self) -> Vec<f64> {
        self.sigma
            .iter()
            .zip(&self.support)
            .map(|(&s, &on)| if on { s } else { 0.0 })
            .collect()
    }
}

fn positive(xs: &[f64], what: &str) -> Result<()> {
    match xs.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        Some(s) => Err(Error::invalid(format!("{what} must be positive, got {s}"))),
        None => Ok(()),
    }
}

/// `KL(N(μ_q, σ_q²) ‖ N(μ_p, σ_p²))`.
pub fn gauss_kl_1d(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> f64 {
    (sigma_p / sigma_q).ln() + (sigma_q * sigma_q + (mu_q - mu_p).powi(2)) / (2.0 * sigma_p * sigma_p) - 0.5
}

/// Bernoulli KL `kl[λ_q ‖ λ_p]` with `0·log 0 = 0`.
pub fn bernoulli_kl(lambda_q: f64, lambda_p: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(lambda_q, lambda_p) + term(1.0 - lambda_q, 1.0 - lambda_p)
}

/// KL between one-dimensional spike-and-slab distributions with slab
/// probabilities λ_q and λ_p.
pub fn spike_slab_kl_1d(
    lambda_q: f64,
    mu_q: f64,
    sigma_q: f64,
    lambda_p: f64,
    mu_p: f64,
    sigma_p: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda_q) || !(lambda_p > 0.0 && lambda_p < 1.0) {
        return Err(Error::invalid("slab probabilities out of range"));
    }
    positive(&[sigma_q, sigma_p], "sigma")?;
    let slab = if lambda_q == 0.0 {
        0.0
    } else {
        lambda_q * gauss_kl_1d(mu_q, sigma_q, mu_p, sigma_p)
    };
    Ok(slab + bernoulli_kl(lambda_q, lambda_p))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlTerms {
    pub gauss: f64,
    pub bern: f64,
}

impl KlTerms {
    pub fn total(&self) -> f64 {
        self.gauss + self.bern
    }
}

/// Spike-and-slab KL with posterior slab probabilities set to the mask.
///
/// The Gaussian part sums over kept in-scope coordinates. The Bernoulli part
/// charges `−log λ_p` per kept and `−log(1 − λ_p)` per masked prunable
/// coordinate; non-prunable coordinates are slab-only on both sides and add
/// nothing.
pub fn kl_spike_slab(post: &SpikeSlabPosterior, prior: &SpikeSlabPrior, scope: Scope) -> Result<KlTerms> {
    post.mean.check_aligned(&prior.mean, "prior mean")?;
    let m = &post.mask;
    let mut gauss = 0.0;
    for i in 0..m.len() {
        if m.is_kept(i) && m.in_scope(scope, i) {
            gauss += gauss_kl_1d(post.mean.values()[i], post.sigma[i], prior.mean.values()[i], prior.sigma[i]);
        }
    }
    let kept = m.kept_prunable() as f64;
    let pruned = m.pruned_count() as f64;
    let bern = kept * -prior.lambda.ln() + pruned * -(1.0 - prior.lambda).ln();
    Ok(KlTerms { gauss, bern })
}

/// `Σ_i KL(N(θ̄_i, σ_q,i²) ‖ N(0, σ_p²))` over the posterior's support.
pub fn kl_gaussian(post: &GaussianPosterior) -> f64 {
    (0..post.sigma.len())
        .filter(|&i| post.support[i])
        .map(|i| gauss_kl_1d(post.mean.values()[i], post.sigma[i], 0.0, post.sigma_p))
        .sum()
}

/// `B = (KL + ln(2√m/δ)) / m`.
pub fn bound_complexity(kl: f64, m: usize, delta: f64) -> f64 {
    let m = m as f64;
    (kl + (2.0 * m.sqrt() / delta).ln()) / m
}

fn check_bound_inputs(risk_q: f64, kl: f64, m: usize, delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&risk_q) {
        return Err(Error::invalid(format!("risk must be in [0, 1], got {risk_q}")));
    }
    if !(kl >= 0.0) || m == 0 || !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::invalid("bound needs KL >= 0, m >= 1 and delta in (0, 1]"));
    }
    Ok(())
}

/// Variational KL bound
/// `min{ r + B + √(B(B + 2r)), r + √(B/2) }`.
pub fn variational_kl_bound(risk_q: f64, kl: f64, m: usize, delta: f64) -> Result<f64> {
    check_bound_inputs(risk_q, kl, m, delta)?;
    Ok(bound_parts(risk_q, bound_complexity(kl, m, delta)).0)
}

/// Bound value and its partial derivatives in `r` and `B` for any `r ≥ 0`.
pub(crate) fn bound_parts(r: f64, b: f64) -> (f64, f64, f64) {
    let s = (b * (b + 2.0 * r)).sqrt();
    let first = r + b + s;
    let second = r + (b / 2.0).sqrt();
    if first <= second {
        let (dr, db) = if s > 0.0 {
            (1.0 + b / s, 1.0 + (b + r) / s)
        } else {
            (1.0, 1.0)
        };
        (first, dr, db)
    } else {
        let db = if b > 0.0 { 0.25 / (b / 2.0).sqrt() } else { 0.0 };
        (second, 1.0, db)
    }
}

#[cfg(test)]
mod tests;
