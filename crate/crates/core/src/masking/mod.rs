//! Pruning masks, scoring criteria and global magnitude pruning.
//!
//! A mask carries two aligned bit planes: `bits` (1 = kept) and `prunable`
//! (1 = eligible for pruning). Non-prunable positions always stay at 1, so the
//! sparsity of a mask is measured over prunable positions only.

mod io;

pub use io::{decode_mask, encode_mask, read_mask, write_mask, MaskSidecar, MASK_MAGIC, MASK_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layout, ParamVector, SegmentKind};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruningMask {
    bits: Vec<bool>,
    prunable: Vec<bool>,
}

impl PruningMask {
    /// All-ones mask over `layout`; weights are prunable, biases only when
    /// `prune_biases` is set.
    pub fn dense(layout: &Layout, prune_biases: bool) -> Self {
        let prunable = layout
            .kinds()
            .into_iter()
            .map(|k| k == SegmentKind::Weight || prune_biases)
            .collect::<Vec<_>>();
        PruningMask {
            bits: vec![true; prunable.len()],
            prunable,
        }
    }

    /// All-ones mask with every position prunable.
    pub fn ones(len: usize) -> Self {
        PruningMask {
            bits: vec![true; len],
            prunable: vec![true; len],
        }
    }

    pub fn from_parts(bits: Vec<bool>, prunable: Vec<bool>) -> Result<Self> {
        if bits.len() != prunable.len() {
            return Err(Error::shape("mask", bits.len(), prunable.len()));
        }
        if let Some(i) = (0..bits.len()).find(|&i| !prunable[i] && !bits[i]) {
            return Err(Error::invalid(format!(
                "non-prunable position {i} is masked"
            )));
        }
        Ok(PruningMask { bits, prunable })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn prunable(&self) -> &[bool] {
        &self.prunable
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.bits[i]
    }

    /// 1.0 at kept positions, 0.0 at masked ones.
    pub fn multipliers(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// `m ⊙ θ`.
    pub fn apply(&self, params: &ParamVector) -> Result<ParamVector> {
        if params.len() != self.len() {
            return Err(Error::shape("mask", params.len(), self.len()));
        }
        let v = params
            .values()
            .iter()
            .zip(&self.bits)
            .map(|(&x, &b)| if b { x } else { 0.0 })
            .collect();
        params.with_values(v)
    }

    pub fn prunable_count(&self) -> usize {
        self.prunable.iter().filter(|&&p| p).count()
    }

    /// Kept positions among the prunable ones.
    pub fn kept_prunable(&self) -> usize {
        self.bits
            .iter()
            .zip(&self.prunable)
            .filter(|(&b, &p)| b && p)
            .count()
    }

    pub fn pruned_count(&self) -> usize {
        self.prunable_count() - self.kept_prunable()
    }

    pub fn kept_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `1 − kept/prunable`; 0 when nothing is prunable.
    pub fn sparsity(&self) -> f64 {
        let p = self.prunable_count();
        if p == 0 {
            return 0.0;
        }
        1.0 - self.kept_prunable() as f64 / p as f64
    }

    pub fn density(&self) -> f64 {
        1.0 - self.sparsity()
    }

    /// Indices that are kept in `self` but masked in `next`.
    pub fn newly_pruned(&self, next: &PruningMask) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.bits[i] && !next.bits[i])
            .collect()
    }
}

/// Which coordinates distance and KL accounting covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Prunable coordinates only (the weights, unless biases are prunable).
    #[default]
    Prunable,
    All,
}

impl PruningMask {
    pub fn in_scope(&self, scope: Scope, i: usize) -> bool {
        scope == Scope::All || self.prunable[i]
    }

    /// `‖m ⊙ (a − b)‖₂` over in-scope coordinates.
    pub fn masked_distance(&self, a: &[f64], b: &[f64], scope: Scope) -> f64 {
        (0..self.len())
            .filter(|&i| self.bits[i] && self.in_scope(scope, i))
            .map(|i| (a[i] - b[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum PruneCriterion {
    /// Keep the largest trained magnitudes.
    LargeFinal,
    /// Keep the smallest trained magnitudes.
    SmallFinal,
    Random,
}

impl PruneCriterion {
    pub const ALL: [PruneCriterion; 3] = [
        PruneCriterion::LargeFinal,
        PruneCriterion::SmallFinal,
        PruneCriterion::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PruneCriterion::LargeFinal => "large_final",
            PruneCriterion::SmallFinal => "small_final",
            PruneCriterion::Random => "random",
        }
    }
}

/// Per-coordinate scores; lower scores are pruned first.
pub fn score<R: Rng + ?Sized>(
    criterion: PruneCriterion,
    trained: &ParamVector,
    rng: &mut R,
) -> Vec<f64> {
    match criterion {
        PruneCriterion::LargeFinal => trained.values().iter().map(|x| x.abs()).collect(),
        PruneCriterion::SmallFinal => trained.values().iter().map(|x| -x.abs()).collect(),
        PruneCriterion::Random => (0..trained.len()).map(|_| rng.random::<f64>()).collect(),
    }
}

/// `⌊p · n⌋`, robust to `p·n` landing a hair below an integer.
pub fn prune_quota(p: f64, unmasked: usize) -> usize {
    let raw = p * unmasked as f64;
    let q = (raw + 1e-9 * raw.max(1.0)).floor() as usize;
    q.min(unmasked)
}

/// One global pruning round: masks the `⌊p · unmasked⌋` lowest-scoring kept
/// prunable positions across all layers. Ties go to the lower index.
pub fn prune_round(mask: &PruningMask, scores: &[f64], p: f64) -> Result<PruningMask> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("prune fraction {p} outside (0, 1)")));
    }
    if scores.len() != mask.len() {
        return Err(Error::shape("scores", mask.len(), scores.len()));
    }
    let mut candidates: Vec<usize> = (0..mask.len())
        .filter(|&i| mask.bits[i] && mask.prunable[i])
        .collect();
    if candidates.is_empty() {
        return Err(Error::NothingToPrune);
    }
    let quota = prune_quota(p, candidates.len());
    candidates.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut next = mask.clone();
    for &i in &candidates[..quota] {
        next.bits[i] = false;
    }
    Ok(next)
}
