//! Continuous sparsification: weights `θ` and gate logits `s` are trained
//! jointly on `L(σ(βs)⊙θ) + η·Σ σ(βs_i)`, with the temperature `β` raised
//! geometrically each epoch and the gates binarized at the end.

use rand::seq::SliceRandom;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imp::{round_record, Split, TicketArtifact, TicketKind};
use crate::masking::{PruningMask, Scope};
use crate::nn::{loss_and_grad_gated, Batch, Model, ParamVector};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::pacbayes::{optimize_posterior_sigma, BoundConfig, BoundReport, PosteriorFamily};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct CsConfig {
    /// Gate penalty η.
    pub eta_pen: f64,
    pub beta0: f64,
    pub beta_final: f64,
    /// Initial value of every prunable gate logit.
    pub s_init: f64,
    /// Gates with `σ(β_T s) ≥ threshold` survive binarization.
    pub threshold: f64,
    /// Learning rate for `s`; follows the weight learning-rate schedule.
    pub gate_lr: f64,
    pub prune_biases: bool,
    pub scope: Scope,
    /// Momentum SGD settings shared by `θ` and `s`.
    pub train: OptimizerConfig,
    /// When set, a spike-and-slab bound is computed for the final ticket.
    pub bound: Option<BoundConfig>,
    pub seed: u64,
}

impl Default for CsConfig {
    fn default() -> Self {
        CsConfig {
            eta_pen: 1e-3,
            beta0: 1.0,
            beta_final: 100.0,
            s_init: 0.05,
            threshold: 0.5,
            gate_lr: 1e-3,
            prune_biases: false,
            scope: Scope::Prunable,
            train: OptimizerConfig::default(),
            bound: None,
            seed: 0,
        }
    }
}

impl CsConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.train.kind != OptimizerKind::Sgd {
            return Err(Error::Config("continuous sparsification trains with sgd only".into()));
        }
        if !(self.eta_pen >= 0.0 && self.eta_pen.is_finite()) {
            return Err(Error::Config(format!("eta_pen must be >= 0, got {}", self.eta_pen)));
        }
        if !(self.beta0 > 0.0) || !(self.beta_final >= self.beta0) || !self.beta_final.is_finite() {
            return Err(Error::Config("need 0 < beta0 <= beta_final".into()));
        }
        if self.s_init == 0.0 || !self.s_init.is_finite() {
            return Err(Error::Config("s_init must be nonzero".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must be in (0, 1)".into()));
        }
        if !(self.gate_lr > 0.0 && self.gate_lr.is_finite()) {
            return Err(Error::Config("gate_lr must be > 0".into()));
        }
        if let Some(b) = &self.bound {
            b.validate()?;
        }
        Ok(())
    }

    /// `β₀·(β_T/β₀)^(e/(E−1))`; a single epoch runs at `β_T`.
    pub fn beta_at(&self, epoch: usize) -> f64 {
        let e = self.train.epochs;
        if e <= 1 {
            return self.beta_final;
        }
        self.beta0 * (self.beta_final / self.beta0).powf(epoch as f64 / (e - 1) as f64)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gate logits over the full parameter vector. Only prunable entries are
/// gated; the rest always pass with gate 1.
#[derive(Clone, Debug, PartialEq)]
pub struct GateState {
    pub s: Vec<f64>,
    pub beta: f64,
    pub prunable: Vec<bool>,
}

impl GateState {
    pub fn new(mask: &PruningMask, s_init: f64, beta: f64) -> Self {
        let prunable: Vec<bool> = mask.prunable().to_vec();
        let s = prunable.iter().map(|&p| if p { s_init } else { 0.0 }).collect();
        GateState { s, beta, prunable }
    }

    /// Gates saturated to exactly 1 at kept and 0 at pruned coordinates.
    pub fn frozen(mask: &PruningMask) -> Self {
        let mut g = GateState::new(mask, 1000.0, 1.0);
        for i in 0..mask.len() {
            if mask.prunable()[i] && !mask.is_kept(i) {
                g.s[i] = -1000.0;
            }
        }
        g
    }

    pub fn gates(&self) -> Vec<f64> {
        self.s
            .iter()
            .zip(&self.prunable)
            .map(|(&s, &p)| if p { sigmoid(self.beta * s) } else { 1.0 })
            .collect()
    }

    /// Mean gate over prunable coordinates.
    pub fn soft_density(&self) -> f64 {
        let g = self.gates();
        let (sum, n) = g
            .iter()
            .zip(&self.prunable)
            .filter(|(_, &p)| p)
            .fold((0.0, 0usize), |(s, n), (g, _)| (s + g, n + 1));
        if n == 0 {
            1.0
        } else {
            sum / n as f64
        }
    }

    /// Keeps prunable coordinates with `σ(βs) ≥ threshold`.
    pub fn binarize(&self, threshold: f64) -> PruningMask {
        let kept = self
            .gates()
            .iter()
            .zip(&self.prunable)
            .map(|(&g, &p)| !p || g >= threshold)
            .collect();
        PruningMask::from_parts(kept, self.prunable.clone()).expect("aligned planes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsObjective {
    pub value: f64,
    pub loss: f64,
    pub penalty: f64,
    pub grad_theta: Vec<f64>,
    /// Zero at non-prunable coordinates.
    pub grad_s: Vec<f64>,
}

/// `L(σ(βs)⊙θ) + η·Σ_prunable σ(βs_i)` with exact gradients in `θ` and `s`.
pub fn cs_objective<M: Model>(
    model: &M,
    params: &ParamVector,
    gates: &GateState,
    eta_pen: f64,
    batch: &Batch,
) -> Result<CsObjective> {
    if gates.s.len() != params.len() {
        return Err(Error::shape("gate logits", params.len(), gates.s.len()));
    }
    let g = gates.gates();
    let eff: Vec<f64> = params.values().iter().zip(&g).map(|(t, g)| t * g).collect();
    let ones = vec![1.0; eff.len()];
    let (loss, d_eff) = loss_and_grad_gated(model, &eff, &ones, batch)?;
    let mut penalty = 0.0;
    let mut grad_s = vec![0.0; eff.len()];
    for i in 0..eff.len() {
        if gates.prunable[i] {
            penalty += g[i];
            let dg = gates.beta * g[i] * (1.0 - g[i]);
            grad_s[i] = (d_eff[i] * params.values()[i] + eta_pen) * dg;
        }
    }
    let penalty = eta_pen * penalty;
    Ok(CsObjective {
        value: loss + penalty,
        loss,
        penalty,
        grad_theta: d_eff.iter().zip(&g).map(|(d, g)| d * g).collect(),
        grad_s,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsEpoch {
    pub epoch: usize,
    pub beta: f64,
    pub loss: f64,
    pub penalty: f64,
    pub soft_density: f64,
    /// Gate logits whose sign flipped during the epoch.
    pub sign_changes: usize,
}

#[derive(Clone, Debug)]
pub struct CsOutcome {
    pub ticket: TicketArtifact,
    pub gates: GateState,
    pub epochs: Vec<CsEpoch>,
    pub density: f64,
    pub train_error: f64,
    pub test_error: Option<f64>,
    pub bound: Option<BoundReport>,
}

/// Trains `(θ, s)` from `init` and returns the binarized ticket with `θ̄ = m⊙θ`.
pub fn run_cs<M: Model>(model: &M, cfg: &CsConfig, init: &ParamVector, split: Split<'_>) -> Result<CsOutcome> {
    cfg.validate()?;
    let data = split.train;
    data.require_not_test("continuous sparsification")?;
    let dense = PruningMask::dense(init.layout(), cfg.prune_biases);
    if dense.prunable_count() == 0 {
        return Err(Error::NothingToPrune);
    }
    let tc = &cfg.train;
    let mut theta = init.clone();
    let mut gates = GateState::new(&dense, cfg.s_init, cfg.beta_at(0));
    let mut v_theta = vec![0.0; theta.len()];
    let mut v_s = vec![0.0; theta.len()];
    let n = data.len();
    let bs = if tc.batch_size == 0 { n } else { tc.batch_size.min(n) };
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(tc.epochs);
    let mut steps = 0u64;

    for epoch in 0..tc.epochs {
        gates.beta = cfg.beta_at(epoch);
        let lr = tc.lr_at(epoch);
        let gate_lr = cfg.gate_lr * lr / tc.lr;
        if bs < n {
            let mut r = rng::stream(cfg.seed, &[rng::label::CS, epoch as u64]);
            order.sort_unstable();
            order.shuffle(&mut r);
        }
        let signs: Vec<bool> = gates.s.iter().map(|&s| s > 0.0).collect();
        let (mut loss, mut penalty, mut count) = (0.0, 0.0, 0);
        for chunk in order.chunks(bs) {
            let owned;
            let batch = if bs == n {
                data
            } else {
                owned = data.select(chunk);
                &owned
            };
            let obj = cs_objective(model, &theta, &gates, cfg.eta_pen, batch)?;
            if !obj.value.is_finite() {
                return Err(Error::NumericAbort(format!("cs objective is {} in epoch {epoch}", obj.value)));
            }
            loss += obj.loss;
            penalty += obj.penalty;
            count += 1;
            steps += 1;
            let values = theta.values().to_vec();
            let mut next = values.clone();
            for i in 0..next.len() {
                v_theta[i] = tc.momentum * v_theta[i] + obj.grad_theta[i];
                next[i] -= lr * v_theta[i];
                if gates.prunable[i] {
                    v_s[i] = tc.momentum * v_s[i] + obj.grad_s[i];
                    gates.s[i] -= gate_lr * v_s[i];
                }
            }
            theta = theta.with_values(next)?;
        }
        let sign_changes = gates
            .s
            .iter()
            .zip(&signs)
            .zip(&gates.prunable)
            .filter(|((&s, &was), &p)| p && (s > 0.0) != was)
            .count();
        if sign_changes > 0 {
            log::debug!("cs epoch {epoch}: {sign_changes} gate logits changed sign");
        }
        epochs.push(CsEpoch {
            epoch,
            beta: gates.beta,
            loss: loss / count as f64,
            penalty: penalty / count as f64,
            soft_density: gates.soft_density(),
            sign_changes,
        });
    }

    gates.beta = cfg.beta_final;
    let mask = gates.binarize(cfg.threshold);
    if mask.kept_prunable() == 0 {
        return Err(Error::GateCollapse { eta_pen: cfg.eta_pen });
    }
    let trained = mask.apply(&theta)?;
    let rec = round_record(model, 0, &trained, init, &mask, split, steps, cfg.scope)?;
    log::info!(
        "cs: density {:.4}, train error {:.4}, distance {:.4}",
        mask.density(),
        rec.train_error,
        rec.distance_init
    );
    let (train_error, test_error) = (rec.train_error, rec.test_error);
    let ticket = TicketArtifact {
        kind: TicketKind::Cs,
        init: init.clone(),
        trained,
        mask,
        rewind_step: 0,
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
        rounds: vec![rec],
    };
    let bound = match &cfg.bound {
        Some(b) => Some(optimize_posterior_sigma(model, &ticket, data, PosteriorFamily::SpikeSlab, b)?.report),
        None => None,
    };
    Ok(CsOutcome {
        density: ticket.mask.density(),
        ticket,
        gates,
        epochs,
        train_error,
        test_error,
        bound,
    })
}

#[cfg(test)]
mod tests;
