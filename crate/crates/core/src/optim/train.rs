use rand::seq::SliceRandom;

use super::{step, OptimizerConfig, OptimizerState, Regularizer};
use crate::error::Result;
use crate::masking::PruningMask;
use crate::nn::{Batch, Model, ParamVector};
use crate::rng;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub steps: u64,
    /// Mean minibatch loss per epoch (at the base point of each step).
    pub epoch_losses: Vec<f64>,
    /// Parameters after exactly `snapshot_at` steps, when requested.
    pub snapshot: Option<ParamVector>,
    pub sam_fallbacks: u64,
}

/// Epoch-based minibatch training of the kept coordinates of `init`.
///
/// Shuffles are drawn from `(cfg.seed, epoch)` streams, so a run is a pure
/// function of its inputs. `snapshot_at = Some(0)` returns `init` itself.
pub fn train<M: Model>(
    model: &M,
    data: &Batch,
    init: &ParamVector,
    mask: &PruningMask,
    cfg: &OptimizerConfig,
    reg: &Regularizer,
    snapshot_at: Option<u64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.require_not_test("train")?;
    let mut params = mask.apply(init)?;
    let mut state = OptimizerState::new(params.len());
    let n = data.len();
    let bs = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let mut order: Vec<usize> = (0..n).collect();
    let mut snapshot = (snapshot_at == Some(0)).then(|| params.clone());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut fallbacks = 0;
    let full = (bs == n).then(|| data.clone());

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        if full.is_none() {
            let mut r = rng::stream(cfg.seed, &[rng::label::SHUFFLE, epoch as u64]);
            order.sort_unstable();
            order.shuffle(&mut r);
        }
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(bs) {
            let owned;
            let batch = match &full {
                Some(b) => b,
                None => {
                    owned = data.select(chunk);
                    &owned
                }
            };
            let info = step(&mut state, cfg, lr, model, &mut params, mask, batch, reg)?;
            fallbacks += info.sam_fallback as u64;
            sum += info.loss;
            count += 1;
            if snapshot_at == Some(state.steps) {
                snapshot = Some(params.clone());
            }
        }
        epoch_losses.push(sum / count as f64);
    }

    Ok(TrainOutcome {
        params,
        steps: state.steps,
        epoch_losses,
        snapshot,
        sam_fallbacks: fallbacks,
    })
}
