use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::risk::perturbed_risk;
use super::{bound_complexity, bound_parts, gauss_kl_1d, variational_kl_bound, SpikeSlabPrior};
use crate::error::{Error, Result};
use crate::imp::TicketArtifact;
use crate::masking::Scope;
use crate::nn::{evaluate, loss_and_grad_gated, Batch, Model};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorFamily {
    /// Spike-and-slab posterior around `θ̄` against a slab prior at `θ_init`.
    SpikeSlab,
    /// Gaussian posterior around `θ̄` against `N(0, σ_p² I)`; noise covers
    /// pruned coordinates too.
    GaussianZeroMean,
}

impl PosteriorFamily {
    pub const ALL: [PosteriorFamily; 2] = [PosteriorFamily::SpikeSlab, PosteriorFamily::GaussianZeroMean];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct BoundConfig {
    pub sigma_p: f64,
    pub delta: f64,
    /// λ_p = 1 − target_sparsity.
    pub target_sparsity: f64,
    pub scope: Scope,
    /// Initial posterior std for every random coordinate.
    pub sigma_init: f64,
    pub steps: usize,
    pub lr: f64,
    /// Noise draws per optimizer step.
    pub mc_samples: usize,
    /// Noise draws for the reported risk.
    pub final_samples: usize,
    /// Minibatch size for optimizer steps; 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            sigma_p: 0.1,
            delta: 0.05,
            target_sparsity: 0.8,
            scope: Scope::Prunable,
            sigma_init: 0.01,
            steps: 200,
            lr: 0.05,
            mc_samples: 8,
            final_samples: 256,
            batch_size: 0,
            seed: 0,
        }
    }
}

impl BoundConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_p > 0.0) || !(self.sigma_init > 0.0) || self.sigma_init > self.sigma_p {
            return Err(Error::Config("need 0 < sigma_init <= sigma_p".into()));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config("delta must be in (0, 1]".into()));
        }
        if !(self.target_sparsity > 0.0 && self.target_sparsity < 1.0) {
            return Err(Error::Config("target_sparsity must be in (0, 1)".into()));
        }
        if self.mc_samples == 0 || self.final_samples < 2 {
            return Err(Error::Config("need mc_samples >= 1 and final_samples >= 2".into()));
        }
        Ok(())
    }

    pub fn lambda_p(&self) -> f64 {
        1.0 - self.target_sparsity
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub family: PosteriorFamily,
    /// 0-1 risk under the posterior.
    pub risk_q: f64,
    pub risk_q_std_error: f64,
    pub risk_q_samples: usize,
    /// Cross-entropy risk under the posterior, from the same draws.
    pub risk_q_xent: f64,
    /// 0-1 risk at the posterior mean.
    pub point_risk: f64,
    pub point_risk_xent: f64,
    pub expected_sharpness: f64,
    pub expected_sharpness_std_error: f64,
    pub kl_gauss: f64,
    pub kl_bern: f64,
    pub kl_total: f64,
    pub bound: f64,
    pub delta: f64,
    pub m: usize,
    pub sigma_p: f64,
    pub lambda_p: Option<f64>,
    pub scope: Scope,
    pub seed: u64,
    pub opt_steps: usize,
    pub opt_samples: usize,
    pub boundary_hits: u64,
    pub diverged: bool,
    /// Which iterate was kept: `initial`, `best` or `last`.
    pub selected: String,
    pub prior_note: String,
}

/// Posterior-mean, prior-mean and support vectors for one family.
struct Problem {
    mean: Vec<f64>,
    prior_mean: Vec<f64>,
    support: Vec<bool>,
    sigma_p: f64,
    kl_bern: f64,
}

impl Problem {
    fn new(ticket: &TicketArtifact, family: PosteriorFamily, cfg: &BoundConfig) -> Result<Self> {
        let m = &ticket.mask;
        let mean = m.apply(&ticket.trained)?.into_values();
        match family {
            PosteriorFamily::SpikeSlab => {
                let prior = SpikeSlabPrior::for_target_sparsity(ticket.init.clone(), cfg.sigma_p, cfg.target_sparsity)?;
                let kl_bern = m.kept_prunable() as f64 * -prior.lambda.ln()
                    + m.pruned_count() as f64 * -(1.0 - prior.lambda).ln();
                Ok(Problem {
                    mean,
                    prior_mean: prior.mean.into_values(),
                    support: (0..m.len()).map(|i| m.is_kept(i) && m.in_scope(cfg.scope, i)).collect(),
                    sigma_p: cfg.sigma_p,
                    kl_bern,
                })
            }
            PosteriorFamily::GaussianZeroMean => Ok(Problem {
                prior_mean: vec![0.0; mean.len()],
                mean,
                support: (0..m.len()).map(|i| m.in_scope(cfg.scope, i)).collect(),
                sigma_p: cfg.sigma_p,
                kl_bern: 0.0,
            }),
        }
    }

    fn kl_gauss(&self, sigma: &[f64]) -> f64 {
        (0..sigma.len())
            .filter(|&i| self.support[i])
            .map(|i| gauss_kl_1d(self.mean[i], sigma[i], self.prior_mean[i], self.sigma_p))
            .sum()
    }

    fn noise_std(&self, sigma: &[f64]) -> Vec<f64> {
        sigma
            .iter()
            .zip(&self.support)
            .map(|(&s, &on)| if on { s } else { 0.0 })
            .collect()
    }
}

fn report<M: Model>(
    model: &M,
    problem: &Problem,
    family: PosteriorFamily,
    sigma: &[f64],
    data: &Batch,
    cfg: &BoundConfig,
) -> Result<BoundReport> {
    let risks = perturbed_risk(model, &problem.mean, &problem.noise_std(sigma), data, cfg.final_samples, cfg.seed)?;
    let kl_gauss = problem.kl_gauss(sigma);
    let kl_total = kl_gauss + problem.kl_bern;
    let r = risks.zero_one;
    Ok(BoundReport {
        family,
        risk_q: r.mean,
        risk_q_std_error: r.std_error,
        risk_q_samples: r.samples,
        risk_q_xent: risks.cross_entropy.mean,
        point_risk: r.point,
        point_risk_xent: risks.cross_entropy.point,
        expected_sharpness: r.sharpness,
        expected_sharpness_std_error: r.sharpness_std_error,
        kl_gauss,
        kl_bern: problem.kl_bern,
        kl_total,
        bound: variational_kl_bound(r.mean, kl_total.max(0.0), data.len(), cfg.delta)?,
        delta: cfg.delta,
        m: data.len(),
        sigma_p: cfg.sigma_p,
        lambda_p: (family == PosteriorFamily::SpikeSlab).then(|| cfg.lambda_p()),
        scope: cfg.scope,
        seed: cfg.seed,
        opt_steps: 0,
        opt_samples: cfg.mc_samples,
        boundary_hits: 0,
        diverged: false,
        selected: "given".into(),
        prior_note: "single prior, no union bound over sigma_p".into(),
    })
}

/// Bound report for a fixed posterior std vector.
pub fn evaluate_bound<M: Model>(
    model: &M,
    ticket: &TicketArtifact,
    data: &Batch,
    family: PosteriorFamily,
    sigma: &[f64],
    cfg: &BoundConfig,
) -> Result<BoundReport> {
    cfg.validate()?;
    data.require_not_test("bound")?;
    if sigma.len() != ticket.trained.len() {
        return Err(Error::shape("posterior sigma", ticket.trained.len(), sigma.len()));
    }
    let problem = Problem::new(ticket, family, cfg)?;
    report(model, &problem, family, sigma, data, cfg)
}

#[derive(Clone, Debug)]
pub struct SigmaOutcome {
    /// Posterior std per coordinate (entries off the support are unused).
    pub sigma: Vec<f64>,
    pub report: BoundReport,
    /// Surrogate bound value per optimizer step.
    pub surrogate: Vec<f64>,
}

/// Minimizes a surrogate of the bound over per-coordinate `log σ_q`:
/// cross-entropy risk with reparameterized noise stands in for the 0-1 risk.
/// σ_q is clipped to `[1e-6, σ_p]`. The initial, best and last iterates are
/// re-scored with the 0-1 risk on common random numbers and the lowest bound
/// is kept.
pub fn optimize_posterior_sigma<M: Model>(
    model: &M,
    ticket: &TicketArtifact,
    data: &Batch,
    family: PosteriorFamily,
    cfg: &BoundConfig,
) -> Result<SigmaOutcome> {
    cfg.validate()?;
    data.require_not_test("bound")?;
    let problem = Problem::new(ticket, family, cfg)?;
    let n = problem.mean.len();
    let m = data.len();
    let ones = vec![1.0; n];
    let (lo, hi) = (1e-6f64.ln(), cfg.sigma_p.ln());
    let mut u = vec![cfg.sigma_init.ln(); n];
    let initial = u.clone();
    let mut best = (f64::INFINITY, u.clone());
    let (mut m1, mut m2) = (vec![0.0; n], vec![0.0; n]);
    let mut surrogate = Vec::with_capacity(cfg.steps);
    let mut hits = 0u64;
    let mut diverged = false;

    for step in 0..cfg.steps {
        let sigma: Vec<f64> = u.iter().map(|x| x.exp()).collect();
        let owned;
        let batch = if cfg.batch_size == 0 || cfg.batch_size >= m {
            data
        } else {
            let mut r = rng::stream(cfg.seed, &[rng::label::SIGMA_OPT, step as u64, 0]);
            let mut idx = index::sample(&mut r, m, cfg.batch_size).into_vec();
            idx.sort_unstable();
            owned = data.select(&idx);
            &owned
        };
        let draws = (0..cfg.mc_samples as u64)
            .into_par_iter()
            .map(|d| {
                let mut r = rng::stream(cfg.seed, &[rng::label::SIGMA_OPT, step as u64, d + 1]);
                let z: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
                let theta: Vec<f64> = (0..n)
                    .map(|i| if problem.support[i] { problem.mean[i] + sigma[i] * z[i] } else { problem.mean[i] })
                    .collect();
                let (loss, g) = loss_and_grad_gated(model, &theta, &ones, batch)?;
                let gu: Vec<f64> = (0..n)
                    .map(|i| if problem.support[i] { g[i] * sigma[i] * z[i] } else { 0.0 })
                    .collect();
                Ok((loss, gu))
            })
            .collect::<Result<Vec<_>>>()?;
        let k = draws.len() as f64;
        let risk = draws.iter().map(|d| d.0).sum::<f64>() / k;
        let mut grad = vec![0.0; n];
        for (_, gu) in &draws {
            for (a, b) in grad.iter_mut().zip(gu) {
                *a += b / k;
            }
        }
        let kl = problem.kl_gauss(&sigma) + problem.kl_bern;
        let b = bound_complexity(kl.max(0.0), m, cfg.delta);
        let (value, d_r, d_b) = bound_parts(risk.max(0.0), b);
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            log::warn!("posterior optimization diverged at step {step}");
            diverged = true;
            break;
        }
        surrogate.push(value);
        if value < best.0 {
            best = (value, u.clone());
        }
        let t = (step + 1) as i32;
        for i in 0..n {
            if !problem.support[i] {
                continue;
            }
            let s2 = sigma[i] * sigma[i];
            let g = d_r * grad[i] + d_b / m as f64 * (s2 / (problem.sigma_p * problem.sigma_p) - 1.0);
            m1[i] = 0.9 * m1[i] + 0.1 * g;
            m2[i] = 0.999 * m2[i] + 0.001 * g * g;
            let mh = m1[i] / (1.0 - 0.9f64.powi(t));
            let vh = m2[i] / (1.0 - 0.999f64.powi(t));
            let next = u[i] - cfg.lr * mh / (vh.sqrt() + 1e-8);
            if next < lo || next > hi {
                hits += 1;
            }
            u[i] = next.clamp(lo, hi);
        }
    }
    if hits > 0 {
        log::info!("sigma clipped to [1e-6, sigma_p] {hits} times");
    }

    let mut chosen: Option<(BoundReport, Vec<f64>)> = None;
    for (name, cand) in [("initial", &initial), ("best", &best.1), ("last", &u)] {
        let sigma: Vec<f64> = cand.iter().map(|x| x.exp()).collect();
        let mut rep = report(model, &problem, family, &sigma, data, cfg)?;
        rep.selected = name.into();
        if chosen.as_ref().is_none_or(|c| rep.bound < c.0.bound) {
            chosen = Some((rep, sigma));
        }
    }
    let (mut rep, sigma) = chosen.unwrap();
    rep.opt_steps = surrogate.len();
    rep.boundary_hits = hits;
    rep.diverged = diverged;
    Ok(SigmaOutcome {
        sigma,
        report: rep,
        surrogate,
    })
}

pub struct ScatterInput<'a> {
    pub ticket: &'a TicketArtifact,
    pub learning_rate: f64,
    pub test: Option<&'a Batch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub ticket: usize,
    pub learning_rate: f64,
    pub family: PosteriorFamily,
    pub kl_total: f64,
    pub kl_gauss: f64,
    pub kl_bern: f64,
    pub risk_q: f64,
    pub risk_q_xent: f64,
    pub bound: f64,
    pub test_error: Option<f64>,
    pub distance_init: f64,
    pub sparsity: f64,
}

/// Optimized (KL, risk) pairs for every ticket under both posterior
/// families.
pub fn kl_risk_scatter<M: Model>(
    model: &M,
    tickets: &[ScatterInput<'_>],
    data: &Batch,
    cfg: &BoundConfig,
) -> Result<Vec<ScatterRow>> {
    if tickets.len() < 2 {
        return Err(Error::invalid("scatter needs at least 2 tickets"));
    }
    let mut rows = Vec::with_capacity(2 * tickets.len());
    for (j, t) in tickets.iter().enumerate() {
        let test_error = match t.test {
            Some(b) => Some(evaluate(model, &t.ticket.trained, &t.ticket.mask, b)?.1),
            None => None,
        };
        let distance = t.ticket.mask.masked_distance(t.ticket.trained.values(), t.ticket.init.values(), cfg.scope);
        for family in PosteriorFamily::ALL {
            let r = optimize_posterior_sigma(model, t.ticket, data, family, cfg)?.report;
            rows.push(ScatterRow {
                ticket: j,
                learning_rate: t.learning_rate,
                family,
                kl_total: r.kl_total,
                kl_gauss: r.kl_gauss,
                kl_bern: r.kl_bern,
                risk_q: r.risk_q,
                risk_q_xent: r.risk_q_xent,
                bound: r.bound,
                test_error,
                distance_init: distance,
                sparsity: t.ticket.sparsity(),
            });
        }
    }
    Ok(rows)
}

pub fn write_scatter_csv<W: Write>(out: W, rows: &[ScatterRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
