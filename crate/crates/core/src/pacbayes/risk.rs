use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SpikeSlabPosterior;
use crate::error::{Error, Result};
use crate::hessian::mean_and_se;
use crate::masking::Scope;
use crate::nn::{forward_gated, zero_one_error, Batch, Model};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum RiskLoss {
    #[default]
    ZeroOne,
    CrossEntropy,
}

/// Monte Carlo estimate of `E_ε[L(θ̄ + ε)]` and of the expected sharpness
/// `E_ε[L(θ̄ + ε)] − L(θ̄)`, both from the same draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub samples: usize,
    pub point: f64,
    pub mean: f64,
    pub std_error: f64,
    pub sharpness: f64,
    pub sharpness_std_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Risks {
    pub zero_one: RiskEstimate,
    pub cross_entropy: RiskEstimate,
}

impl Risks {
    pub fn get(&self, loss: RiskLoss) -> RiskEstimate {
        match loss {
            RiskLoss::ZeroOne => self.zero_one,
            RiskLoss::CrossEntropy => self.cross_entropy,
        }
    }
}

/// `ε_i = std_i · z_i`, exactly `0.0` wherever `std_i = 0`.
pub fn sample_perturbation(std: &[f64], seed: u64, path: &[u64]) -> Vec<f64> {
    let mut r = rng::stream(seed, path);
    std.iter()
        .map(|&s| {
            let z: f64 = r.sample(StandardNormal);
            if s == 0.0 {
                0.0
            } else {
                s * z
            }
        })
        .collect()
}

fn estimate(point: f64, xs: &[f64]) -> RiskEstimate {
    let (mean, se) = mean_and_se(xs);
    let diffs: Vec<f64> = xs.iter().map(|x| x - point).collect();
    let (sharp, sharp_se) = mean_and_se(&diffs);
    RiskEstimate {
        samples: xs.len(),
        point,
        mean,
        std_error: se,
        sharpness: sharp,
        sharpness_std_error: sharp_se,
    }
}

/// Risk of `mean + ε` with independent `ε_i ~ N(0, std_i²)`. Draw `d` uses
/// the stream `(seed, [label, d])`, so equal seeds give common random
/// numbers across candidates. The 0-1 risk is NaN for models without logits.
pub fn perturbed_risk<M: Model>(
    model: &M,
    mean: &[f64],
    std: &[f64],
    batch: &Batch,
    k: usize,
    seed: u64,
) -> Result<Risks> {
    if k < 2 {
        return Err(Error::invalid("risk estimate needs at least 2 samples"));
    }
    if std.len() != mean.len() {
        return Err(Error::shape("noise std", mean.len(), std.len()));
    }
    let ones = vec![1.0; mean.len()];
    let eval = |theta: &[f64]| -> Result<(f64, f64)> {
        let f = forward_gated(model, theta, &ones, batch)?;
        let err = f
            .logits
            .map_or(f64::NAN, |l| zero_one_error(&l, batch.labels()));
        Ok((f.loss, err))
    };
    let (p_xent, p_err) = eval(mean)?;
    let draws = (0..k as u64)
        .into_par_iter()
        .map(|d| {
            let eps = sample_perturbation(std, seed, &[rng::label::SHARPNESS, d]);
            let theta: Vec<f64> = mean.iter().zip(&eps).map(|(m, e)| m + e).collect();
            eval(&theta)
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let xent: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let err: Vec<f64> = draws.iter().map(|d| d.1).collect();
    Ok(Risks {
        zero_one: estimate(p_err, &err),
        cross_entropy: estimate(p_xent, &xent),
    })
}

/// Expected sharpness with noise on unpruned in-scope weights only.
pub fn expected_sharpness<M: Model>(
    model: &M,
    post: &SpikeSlabPosterior,
    scope: Scope,
    batch: &Batch,
    k: usize,
    seed: u64,
    loss: RiskLoss,
) -> Result<RiskEstimate> {
    let std = post.noise_std(scope);
    Ok(perturbed_risk(model, post.mean.values(), &std, batch, k, seed)?.get(loss))
}
