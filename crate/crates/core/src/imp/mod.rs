//! Iterative magnitude pruning with weight rewinding, retraining under a
//! given mask, pruning-criteria comparisons and the second-order Taylor
//! bound diagnostic.

mod ticket;

pub use ticket::{TicketArtifact, TicketKind, TicketManifest, TICKET_MANIFEST};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::{dominant_eigenpair, PowerConfig};
use crate::masking::{prune_round, score, PruneCriterion, PruningMask, Scope};
use crate::nn::{evaluate, forward, loss_and_grad, norm, Batch, Model, ParamVector};
use crate::optim::{train, OptimizerConfig, Regularizer, RegularizerConfig};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ImpConfig {
    /// Fraction p of the remaining prunable weights removed per round.
    pub prune_fraction: f64,
    /// Target sparsity β. The round count is the smallest `k` with
    /// `(1 − p)^k ≤ 1 − β`.
    pub target_sparsity: f64,
    /// Explicit number of pruning rounds, overriding the target.
    pub rounds: Option<usize>,
    pub criterion: PruneCriterion,
    /// Optimizer step T₀ whose weights surviving coordinates rewind to.
    pub rewind_step: u64,
    pub prune_biases: bool,
    pub scope: Scope,
    pub train: OptimizerConfig,
    pub regularizer: RegularizerConfig,
    /// Seed for random pruning scores.
    pub seed: u64,
}

impl Default for ImpConfig {
    fn default() -> Self {
        ImpConfig {
            prune_fraction: 0.2,
            target_sparsity: 0.8,
            rounds: None,
            criterion: PruneCriterion::LargeFinal,
            rewind_step: 0,
            prune_biases: false,
            scope: Scope::Prunable,
            train: OptimizerConfig::default(),
            regularizer: RegularizerConfig::default(),
            seed: 0,
        }
    }
}

impl ImpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_sparsity > 0.0 && self.target_sparsity < 1.0) {
            return Err(Error::Config(format!(
                "target_sparsity must be in (0, 1), got {}",
                self.target_sparsity
            )));
        }
        if !(self.prune_fraction > 0.0 && self.prune_fraction < 1.0) {
            return Err(Error::Config(format!(
                "prune_fraction must be in (0, 1), got {}",
                self.prune_fraction
            )));
        }
        self.train.validate()
    }

    pub fn planned_rounds(&self) -> usize {
        if let Some(k) = self.rounds {
            return k;
        }
        let keep = (1.0 - self.target_sparsity).ln() / (1.0 - self.prune_fraction).ln();
        (keep - 1e-9).ceil().max(1.0) as usize
    }
}

/// Borrowed train/test split. The test part is only ever evaluated.
#[derive(Clone, Copy, Debug)]
pub struct Split<'a> {
    pub train: &'a Batch,
    pub test: Option<&'a Batch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sparsity: f64,
    pub kept: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub train_error: f64,
    pub test_error: Option<f64>,
    /// `‖m ⊙ (θ̄ − θ_init)‖₂`.
    pub distance_init: f64,
    pub weight_norm: f64,
}

pub(crate) fn round_record<M: Model>(
    model: &M,
    round: usize,
    trained: &ParamVector,
    init: &ParamVector,
    mask: &PruningMask,
    split: Split<'_>,
    steps: u64,
    scope: Scope,
) -> Result<RoundRecord> {
    let (train_loss, train_error) = evaluate(model, trained, mask, split.train)?;
    let test_error = match split.test {
        Some(t) => Some(evaluate(model, trained, mask, t)?.1),
        None => None,
    };
    let zeros = vec![0.0; trained.len()];
    Ok(RoundRecord {
        round,
        sparsity: mask.sparsity(),
        kept: mask.kept_prunable(),
        steps,
        train_loss,
        train_error,
        test_error,
        distance_init: mask.masked_distance(trained.values(), init.values(), scope),
        weight_norm: mask.masked_distance(trained.values(), &zeros, scope),
    })
}

/// Train, prune the lowest-scoring fraction globally, rewind survivors to
/// `θ_{T₀}`, and repeat for the planned number of rounds. The final round
/// trains without pruning.
pub fn run_imp<M: Model>(
    model: &M,
    cfg: &ImpConfig,
    init: &ParamVector,
    split: Split<'_>,
) -> Result<TicketArtifact> {
    cfg.validate()?;
    split.train.require_not_test("imp")?;
    let mut mask = PruningMask::dense(init.layout(), cfg.prune_biases);
    if mask.prunable_count() == 0 {
        return Err(Error::NothingToPrune);
    }
    let mut start = init.clone();
    let mut rewind: Option<ParamVector> = None;
    let mut rounds = Vec::new();
    let planned = cfg.planned_rounds();
    let mut round = 0;
    loop {
        let anchor = rewind.as_ref().unwrap_or(init);
        let reg = Regularizer::from_config(cfg.regularizer, Some(anchor))?;
        let snap = (round == 0).then_some(cfg.rewind_step);
        let out = train(model, split.train, &start, &mask, &cfg.train, &reg, snap)?;
        if round == 0 {
            rewind = Some(out.snapshot.clone().ok_or_else(|| {
                Error::Config(format!(
                    "rewind_step {} exceeds the {} steps of one round",
                    cfg.rewind_step, out.steps
                ))
            })?);
        }
        let theta0 = rewind.as_ref().unwrap();
        let rec = round_record(model, round, &out.params, theta0, &mask, split, out.steps, cfg.scope)?;
        log::info!(
            "imp round {round}: sparsity {:.4}, train error {:.4}, distance {:.4}",
            rec.sparsity,
            rec.train_error,
            rec.distance_init
        );
        rounds.push(rec);
        if round >= planned {
            return Ok(TicketArtifact {
                kind: TicketKind::Imp,
                init: theta0.clone(),
                trained: out.params,
                mask,
                rewind_step: cfg.rewind_step,
                seed: cfg.seed,
                config: serde_json::to_value(cfg)?,
                rounds,
            });
        }
        let mut r = rng::stream(cfg.seed, &[rng::label::SCORE, round as u64]);
        let scores = score(cfg.criterion, &out.params, &mut r);
        mask = prune_round(&mask, &scores, cfg.prune_fraction)?;
        start = mask.apply(theta0)?;
        round += 1;
    }
}

#[derive(Clone, Debug)]
pub struct RetrainOutcome {
    pub params: ParamVector,
    pub train_error: f64,
    pub test_error: Option<f64>,
    /// Test accuracy minus the baseline's, when both are known.
    pub test_accuracy_delta: Option<f64>,
    pub distance_init: f64,
}

/// Trains the unmasked coordinates of `init` under a fixed mask.
pub fn retrain_with_mask<M: Model>(
    model: &M,
    mask: &PruningMask,
    init: &ParamVector,
    train_cfg: &OptimizerConfig,
    reg_cfg: RegularizerConfig,
    split: Split<'_>,
    baseline_test_error: Option<f64>,
) -> Result<RetrainOutcome> {
    if mask.len() != init.len() {
        return Err(Error::shape("mask", init.len(), mask.len()));
    }
    let reg = Regularizer::from_config(reg_cfg, Some(init))?;
    let out = train(model, split.train, init, mask, train_cfg, &reg, None)?;
    let rec = round_record(model, 0, &out.params, init, mask, split, out.steps, Scope::Prunable)?;
    let delta = match (rec.test_error, baseline_test_error) {
        (Some(t), Some(b)) => Some(b - t),
        _ => None,
    };
    Ok(RetrainOutcome {
        params: out.params,
        train_error: rec.train_error,
        test_error: rec.test_error,
        test_accuracy_delta: delta,
        distance_init: rec.distance_init,
    })
}

/// Train-accuracy drops in percentage points, relative to the ticket's
/// trained accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionDrop {
    pub criterion: PruneCriterion,
    pub after_prune: f64,
    pub after_rewind: f64,
    pub after_retrain: f64,
}

/// Applies one further pruning round with each criterion to the same trained
/// ticket and measures the train-accuracy drop after pruning, after
/// rewinding, and after retraining from the rewound weights.
pub fn criteria_drop_table<M: Model>(
    model: &M,
    ticket: &TicketArtifact,
    criteria: &[PruneCriterion],
    prune_fraction: f64,
    train_cfg: &OptimizerConfig,
    data: &Batch,
) -> Result<Vec<CriterionDrop>> {
    data.require_not_test("criteria_drop_table")?;
    let acc = |p: &ParamVector, m: &PruningMask| -> Result<f64> {
        Ok(100.0 * (1.0 - evaluate(model, p, m, data)?.1))
    };
    let base = acc(&ticket.trained, &ticket.mask)?;
    criteria
        .iter()
        .map(|&c| {
            let mut r = rng::stream(ticket.seed, &[rng::label::SCORE, ticket.rounds.len() as u64, 1]);
            let scores = score(c, &ticket.trained, &mut r);
            let next = prune_round(&ticket.mask, &scores, prune_fraction)?;
            let after_prune = acc(&ticket.trained, &next)? - base;
            let after_rewind = acc(&ticket.init, &next)? - base;
            let out = train(model, data, &ticket.init, &next, train_cfg, &Regularizer::none(), None)?;
            let after_retrain = acc(&out.params, &next)? - base;
            Ok(CriterionDrop {
                criterion: c,
                after_prune,
                after_rewind,
                after_retrain,
            })
        })
        .collect()
}

/// Per-criterion mean over several tables with the same criterion order.
pub fn mean_drops(tables: &[Vec<CriterionDrop>]) -> Vec<CriterionDrop> {
    let Some(first) = tables.first() else {
        return Vec::new();
    };
    let n = tables.len() as f64;
    first
        .iter()
        .enumerate()
        .map(|(j, d)| CriterionDrop {
            criterion: d.criterion,
            after_prune: tables.iter().map(|t| t[j].after_prune).sum::<f64>() / n,
            after_rewind: tables.iter().map(|t| t[j].after_rewind).sum::<f64>() / n,
            after_retrain: tables.iter().map(|t| t[j].after_retrain).sum::<f64>() / n,
        })
        .collect()
}

/// `Δθ` that zeroes the coordinates pruned when moving from `mask` to `next`.
pub fn pruning_delta(trained: &ParamVector, mask: &PruningMask, next: &PruningMask) -> Result<ParamVector> {
    let mut d = vec![0.0; trained.len()];
    for i in mask.newly_pruned(next) {
        d[i] = -trained.values()[i];
    }
    trained.with_values(d)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TaylorConfig {
    /// Evenly spaced γ points on [0, 1].
    pub gamma_points: usize,
    pub slack: f64,
    pub power: PowerConfig,
    pub seed: u64,
}

impl Default for TaylorConfig {
    fn default() -> Self {
        TaylorConfig {
            gamma_points: 11,
            slack: 0.05,
            power: PowerConfig {
                max_iters: 300,
                tol: 1e-8,
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorCheck {
    /// `|L(θ̄+Δθ) − L(θ̄)|`.
    pub lhs: f64,
    /// `½‖Δθ‖² · max_γ ‖H(θ̄+γΔθ)‖₂`.
    pub rhs: f64,
    pub rhs_with_slack: f64,
    pub holds: bool,
    pub delta_norm: f64,
    /// `(γ, ‖H‖₂)` for every grid point.
    pub curvature: Vec<(f64, f64)>,
    pub grad_norm: f64,
    pub grad_tolerance: f64,
    pub stationary: bool,
}

/// Compares the loss change caused by `delta` with the second-order bound
/// built from Hessian spectral norms along the segment. The supremum over γ
/// is estimated on a grid, so this is a diagnostic, not a certificate.
pub fn taylor_bound_check<M: Model>(
    model: &M,
    trained: &ParamVector,
    mask: &PruningMask,
    delta: &ParamVector,
    batch: &Batch,
    cfg: &TaylorConfig,
) -> Result<TaylorCheck> {
    trained.check_aligned(delta, "delta")?;
    if cfg.gamma_points < 2 {
        return Err(Error::invalid("gamma grid needs at least 2 points"));
    }
    let delta = mask.apply(delta)?;
    let (l0, g) = loss_and_grad(model, trained, mask, batch)?;
    let grad_norm = g.norm2();
    let grad_tolerance = 1e-3 * (mask.kept_count() as f64).sqrt();
    let stationary = grad_norm < grad_tolerance;
    if !stationary {
        log::warn!("taylor check at a non-stationary point: grad norm {grad_norm:.3e} >= {grad_tolerance:.3e}");
    }
    let shifted = |gamma: f64| -> Result<ParamVector> {
        trained.with_values(
            trained
                .values()
                .iter()
                .zip(delta.values())
                .map(|(t, d)| t + gamma * d)
                .collect(),
        )
    };
    let l1 = forward(model, &shifted(1.0)?, mask, batch)?.loss;
    let lhs = (l1 - l0).abs();
    let delta_norm = norm(delta.values());
    let mut curvature = Vec::with_capacity(cfg.gamma_points);
    if delta_norm > 0.0 {
        let last = (cfg.gamma_points - 1) as f64;
        for i in 0..cfg.gamma_points {
            let gamma = i as f64 / last;
            let e = dominant_eigenpair(model, &shifted(gamma)?, mask, batch, &cfg.power, cfg.seed)?;
            curvature.push((gamma, e.value.abs()));
        }
    }
    let sup = curvature.iter().map(|c| c.1).fold(0.0, f64::max);
    let rhs = 0.5 * delta_norm * delta_norm * sup;
    let rhs_with_slack = rhs * (1.0 + cfg.slack);
    Ok(TaylorCheck {
        lhs,
        rhs,
        rhs_with_slack,
        holds: lhs <= rhs_with_slack,
        delta_norm,
        curvature,
        grad_norm,
        grad_tolerance,
        stationary,
    })
}
