//! Masked-parameter optimizers (SGD with momentum, SAM, NVRM) and the
//! distance regularizers `λ‖m⊙(θ−θ₀)‖²` and `λ‖m⊙θ‖²`.
//!
//! Every optimizer only ever writes kept coordinates, so masked parameters
//! keep their value (0 after pruning) for any number of steps.

mod train;

pub use train::{train, TrainOutcome};

use rand_distr::{Distribution, StandardNormal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::PruningMask;
use crate::nn::{loss_and_grad_gated, Batch, Model, ParamVector};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Sam,
    Nvrm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` every `every` epochs.
    Step { every: usize, factor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    /// SAM neighbourhood radius ρ.
    pub sam_rho: f64,
    /// NVRM noise standard deviation b (absolute, not layer-scaled).
    pub nvrm_b: f64,
    /// Noise draws averaged per NVRM step.
    pub nvrm_samples: usize,
    pub epochs: usize,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.9,
            sam_rho: 0.05,
            nvrm_b: 0.014,
            nvrm_samples: 1,
            epochs: 20,
            batch_size: 64,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.sam_rho < 0.0 || self.nvrm_b < 0.0 {
            return Err(Error::Config("sam_rho and nvrm_b must be >= 0".into()));
        }
        if self.nvrm_samples == 0 {
            return Err(Error::Config("nvrm_samples must be >= 1".into()));
        }
        if let LrSchedule::Step { every, factor } = self.lr_schedule {
            if every == 0 || !(factor > 0.0) {
                return Err(Error::Config("step schedule needs every >= 1 and factor > 0".into()));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Step { every, factor } => self.lr * factor.powi((epoch / every) as i32),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    None,
    L2Init,
    L2Norm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    pub lambda: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            kind: RegularizerKind::None,
            lambda: 0.0,
        }
    }
}

/// Regularizer with its anchor resolved.
#[derive(Clone, Debug)]
pub struct Regularizer {
    pub kind: RegularizerKind,
    pub lambda: f64,
    /// θ_init; required for [`RegularizerKind::L2Init`].
    pub anchor: Option<ParamVector>,
}

impl Regularizer {
    pub fn none() -> Self {
        Regularizer {
            kind: RegularizerKind::None,
            lambda: 0.0,
            anchor: None,
        }
    }

    pub fn from_config(cfg: RegularizerConfig, anchor: Option<&ParamVector>) -> Result<Self> {
        if cfg.lambda < 0.0 {
            return Err(Error::Config("regularizer lambda must be >= 0".into()));
        }
        Ok(Regularizer {
            kind: cfg.kind,
            lambda: cfg.lambda,
            anchor: anchor.cloned(),
        })
    }

    fn is_active(&self) -> bool {
        self.kind != RegularizerKind::None && self.lambda != 0.0
    }
}

/// Value and gradient of the regularizer on `values`. Only kept, prunable
/// coordinates contribute.
pub fn reg_term_values(
    reg: &Regularizer,
    values: &[f64],
    mask: &PruningMask,
) -> Result<(f64, Vec<f64>)> {
    let n = values.len();
    let mut grad = vec![0.0; n];
    if reg.kind == RegularizerKind::None {
        return Ok((0.0, grad));
    }
    let anchor = match reg.kind {
        RegularizerKind::L2Init => {
            let a = reg
                .anchor
                .as_ref()
                .ok_or_else(|| Error::Config("l2_init needs an anchor (θ_init)".into()))?;
            if a.len() != n {
                return Err(Error::shape("anchor", n, a.len()));
            }
            Some(a.values())
        }
        _ => None,
    };
    let mut value = 0.0;
    for i in 0..n {
        if !(mask.bits()[i] && mask.prunable()[i]) {
            continue;
        }
        let d = values[i] - anchor.map_or(0.0, |a| a[i]);
        value += d * d;
        grad[i] = 2.0 * reg.lambda * d;
    }
    Ok((reg.lambda * value, grad))
}

pub fn reg_term(
    reg: &Regularizer,
    params: &ParamVector,
    mask: &PruningMask,
) -> Result<(f64, ParamVector)> {
    let (v, g) = reg_term_values(reg, params.values(), mask)?;
    Ok((v, params.with_values(g)?))
}

/// Loss + regularizer and its gradient at `values`.
pub fn total_loss_grad<M: Model>(
    model: &M,
    values: &[f64],
    gate: &[f64],
    mask: &PruningMask,
    batch: &Batch,
    reg: &Regularizer,
) -> Result<(f64, Vec<f64>)> {
    let (mut loss, mut g) = loss_and_grad_gated(model, values, gate, batch)?;
    if reg.is_active() {
        let (rv, rg) = reg_term_values(reg, values, mask)?;
        loss += rv;
        for (gi, ri) in g.iter_mut().zip(rg) {
            *gi += ri;
        }
    }
    Ok((loss, g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            velocity: vec![0.0; len],
            steps: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Total loss at the base point θ.
    pub loss: f64,
    /// `true` when SAM fell back to a plain step because ‖m⊙g‖ = 0.
    pub sam_fallback: bool,
}

fn check_finite(g: &[f64], loss: f64, step: u64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NumericAbort(format!("loss is {loss} at step {step}")));
    }
    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
        return Err(Error::NumericAbort(format!(
            "gradient coordinate {i} is {} at step {step} (loss {loss})",
            g[i]
        )));
    }
    Ok(())
}

/// `v ← μv + g; θ ← θ − lr·v` on kept coordinates.
fn apply_update(
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    values: &mut [f64],
    mask: &PruningMask,
    g: &[f64],
) {
    for i in 0..values.len() {
        if !mask.bits()[i] {
            continue;
        }
        let v = momentum * state.velocity[i] + g[i];
        state.velocity[i] = v;
        values[i] -= lr * v;
    }
    state.steps += 1;
}

#[allow(clippy::too_many_arguments)]
pub fn step_sgd<M: Model>(
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    lr: f64,
    model: &M,
    params: &mut ParamVector,
    mask: &PruningMask,
    batch: &Batch,
    reg: &Regularizer,
) -> Result<StepInfo> {
    let gate = mask.multipliers();
    let (loss, g) = total_loss_grad(model, params.values(), &gate, mask, batch, reg)?;
    check_finite(&g, loss, state.steps)?;
    apply_update(state, lr, cfg.momentum, params.values_mut(), mask, &g);
    Ok(StepInfo {
        loss,
        sam_fallback: false,
    })
}

/// Two-step SAM: ascend to `θ + ρ·(m⊙g)/‖m⊙g‖`, take the gradient there, and
/// apply the momentum update at θ.
#[allow(clippy::too_many_arguments)]
pub fn step_sam<M: Model>(
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    lr: f64,
    model: &M,
    params: &mut ParamVector,
    mask: &PruningMask,
    batch: &Batch,
    reg: &Regularizer,
) -> Result<StepInfo> {
    let gate = mask.multipliers();
    let (loss, g) = total_loss_grad(model, params.values(), &gate, mask, batch, reg)?;
    check_finite(&g, loss, state.steps)?;
    let gnorm = masked_norm(&g, mask);
    if cfg.sam_rho == 0.0 || gnorm == 0.0 {
        apply_update(state, lr, cfg.momentum, params.values_mut(), mask, &g);
        return Ok(StepInfo {
            loss,
            sam_fallback: gnorm == 0.0,
        });
    }
    let eps = sam_perturbation(&g, mask, cfg.sam_rho, gnorm);
    let shifted: Vec<f64> = params.values().iter().zip(&eps).map(|(t, e)| t + e).collect();
    let (l2, g2) = total_loss_grad(model, &shifted, &gate, mask, batch, reg)?;
    check_finite(&g2, l2, state.steps)?;
    apply_update(state, lr, cfg.momentum, params.values_mut(), mask, &g2);
    Ok(StepInfo {
        loss,
        sam_fallback: false,
    })
}

fn masked_norm(g: &[f64], mask: &PruningMask) -> f64 {
    g.iter()
        .zip(mask.bits())
        .filter(|(_, &b)| b)
        .map(|(x, _)| x * x)
        .sum::<f64>()
        .sqrt()
}

/// `ρ·(m⊙g)/‖m⊙g‖`, zero at masked coordinates.
pub fn sam_perturbation(g: &[f64], mask: &PruningMask, rho: f64, gnorm: f64) -> Vec<f64> {
    g.iter()
        .zip(mask.bits())
        .map(|(&x, &b)| if b { rho * x / gnorm } else { 0.0 })
        .collect()
}

/// NVRM: average the gradient over `nvrm_samples` draws of
/// `θ + ε, ε ~ N(0, b²)` on kept coordinates, then take a momentum step.
#[allow(clippy::too_many_arguments)]
pub fn step_nvrm<M: Model>(
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    lr: f64,
    model: &M,
    params: &mut ParamVector,
    mask: &PruningMask,
    batch: &Batch,
    reg: &Regularizer,
) -> Result<StepInfo> {
    let gate = mask.multipliers();
    // Without noise every draw is the same point.
    let k = if cfg.nvrm_b == 0.0 { 1 } else { cfg.nvrm_samples.max(1) };
    let n = params.len();
    let mut avg = vec![0.0; n];
    let mut loss_sum = 0.0;
    for draw in 0..k {
        let (loss, g) = if cfg.nvrm_b == 0.0 {
            total_loss_grad(model, params.values(), &gate, mask, batch, reg)?
        } else {
            let noisy = nvrm_point(params.values(), mask, cfg.nvrm_b, cfg.seed, state.steps, draw as u64);
            total_loss_grad(model, &noisy, &gate, mask, batch, reg)?
        };
        check_finite(&g, loss, state.steps)?;
        loss_sum += loss;
        for (a, gi) in avg.iter_mut().zip(&g) {
            *a += gi;
        }
    }
    if k > 1 {
        let inv = 1.0 / k as f64;
        avg.iter_mut().for_each(|a| *a *= inv);
    }
    apply_update(state, lr, cfg.momentum, params.values_mut(), mask, &avg);
    Ok(StepInfo {
        loss: loss_sum / k as f64,
        sam_fallback: false,
    })
}

/// `θ + ε` with `ε_i ~ N(0, b²)` on kept coordinates and `ε_i = 0` on masked
/// ones, drawn from the `(seed, step, draw)` stream.
pub fn nvrm_point(values: &[f64], mask: &PruningMask, b: f64, seed: u64, step: u64, draw: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, &[rng::label::NVRM, step, draw]);
    values
        .iter()
        .zip(mask.bits())
        .map(|(&t, &kept)| {
            if kept {
                let z: f64 = StandardNormal.sample(&mut r);
                t + b * z
            } else {
                t
            }
        })
        .collect()
}

/// Dispatches on `cfg.kind`.
#[allow(clippy::too_many_arguments)]
pub fn step<M: Model>(
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    lr: f64,
    model: &M,
    params: &mut ParamVector,
    mask: &PruningMask,
    batch: &Batch,
    reg: &Regularizer,
) -> Result<StepInfo> {
    match cfg.kind {
        OptimizerKind::Sgd => step_sgd(state, cfg, lr, model, params, mask, batch, reg),
        OptimizerKind::Sam => step_sam(state, cfg, lr, model, params, mask, batch, reg),
        OptimizerKind::Nvrm => step_nvrm(state, cfg, lr, model, params, mask, batch, reg),
    }
}
