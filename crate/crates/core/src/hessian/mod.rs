//! Curvature diagnostics restricted to the unmasked subspace.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::PruningMask;
use crate::nn::{dot, forward, hvp_gated, norm, Batch, Model, ParamVector};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PowerConfig {
    pub max_iters: usize,
    /// Relative change in the Rayleigh quotient that counts as converged.
    pub tol: f64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig {
            max_iters: 100,
            tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Eigenpair {
    pub value: f64,
    /// Unit vector, exactly zero at masked coordinates.
    pub vector: ParamVector,
    /// `‖Hv − λv‖₂`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Rayleigh quotient after each iteration.
    pub history: Vec<f64>,
}

struct MaskedOperator<'a, M: Model> {
    model: &'a M,
    values: &'a [f64],
    gate: Vec<f64>,
    batch: &'a Batch,
    shift: f64,
}

impl<M: Model> MaskedOperator<'_, M> {
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut hv = hvp_gated(self.model, self.values, &self.gate, self.batch, v)?;
        if self.shift != 0.0 {
            for ((h, &x), &g) in hv.iter_mut().zip(v).zip(&self.gate) {
                *h += self.shift * g * x;
            }
        }
        Ok(hv)
    }
}

fn start_vector(mask: &PruningMask, seed: u64) -> Result<Vec<f64>> {
    let mut r = rng::stream(seed, &[rng::label::POWER]);
    let mut v: Vec<f64> = (0..mask.len())
        .map(|i| {
            let z: f64 = r.sample(StandardNormal);
            if mask.is_kept(i) {
                z
            } else {
                0.0
            }
        })
        .collect();
    let n = norm(&v);
    if n == 0.0 {
        return Err(Error::invalid("mask keeps no coordinates"));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

fn power<M: Model>(op: &MaskedOperator<'_, M>, v0: Vec<f64>, cfg: &PowerConfig) -> Result<(f64, Vec<f64>, usize, bool, Vec<f64>)> {
    let mut v = v0;
    let mut lambda = f64::NAN;
    let mut history = Vec::new();
    for it in 1..=cfg.max_iters {
        let w = op.apply(&v)?;
        let rq = dot(&v, &w);
        history.push(rq);
        let wn = norm(&w);
        if !rq.is_finite() || !wn.is_finite() {
            return Err(Error::NumericAbort("non-finite Hessian-vector product".into()));
        }
        let done = lambda.is_finite() && (rq - lambda).abs() <= cfg.tol * rq.abs().max(1e-300);
        lambda = rq;
        if wn == 0.0 {
            return Ok((0.0, v, it, true, history));
        }
        v = w.into_iter().map(|x| x / wn).collect();
        if done {
            return Ok((lambda, v, it, true, history));
        }
    }
    Ok((lambda, v, cfg.max_iters, false, history))
}

fn finish<M: Model>(op: &MaskedOperator<'_, M>, params: &ParamVector, v: Vec<f64>, iterations: usize, converged: bool, history: Vec<f64>) -> Result<Eigenpair> {
    let hv = op.apply(&v)?;
    let value = dot(&v, &hv) - op.shift;
    let unshifted: Vec<f64> = hv.iter().zip(&v).map(|(h, x)| h - op.shift * x).collect();
    let r: Vec<f64> = unshifted.iter().zip(&v).map(|(h, x)| h - value * x).collect();
    let residual = norm(&r);
    if !converged {
        log::warn!("power iteration stopped after {iterations} iterations, residual {residual:.3e}");
    }
    Ok(Eigenpair {
        value,
        vector: params.with_values(v)?,
        residual,
        iterations,
        converged,
        history: history.into_iter().map(|h| h - op.shift).collect(),
    })
}

fn operator<'a, M: Model>(model: &'a M, params: &'a ParamVector, mask: &PruningMask, batch: &'a Batch) -> Result<MaskedOperator<'a, M>> {
    if params.len() != mask.len() {
        return Err(Error::shape("mask", params.len(), mask.len()));
    }
    Ok(MaskedOperator {
        model,
        values: params.values(),
        gate: mask.multipliers(),
        batch,
        shift: 0.0,
    })
}

/// Eigenpair of largest magnitude of the masked Hessian, by plain power
/// iteration. `|value|` is the spectral norm.
pub fn dominant_eigenpair<M: Model>(
    model: &M,
    params: &ParamVector,
    mask: &PruningMask,
    batch: &Batch,
    cfg: &PowerConfig,
    seed: u64,
) -> Result<Eigenpair> {
    if cfg.max_iters == 0 {
        return Err(Error::invalid("power iteration needs at least one iteration"));
    }
    let op = operator(model, params, mask, batch)?;
    let (_, v, it, conv, hist) = power(&op, start_vector(mask, seed)?, cfg)?;
    finish(&op, params, v, it, conv, hist)
}

/// Largest algebraic eigenvalue of the masked Hessian and its eigenvector.
///
/// When the dominant eigenvalue is negative the iteration is repeated on
/// `H − λ_dom·I`, whose top eigenvector is the one sought.
pub fn top_eigenpair<M: Model>(
    model: &M,
    params: &ParamVector,
    mask: &PruningMask,
    batch: &Batch,
    cfg: &PowerConfig,
    seed: u64,
) -> Result<Eigenpair> {
    let dom = dominant_eigenpair(model, params, mask, batch, cfg, seed)?;
    if dom.value >= 0.0 {
        return Ok(dom);
    }
    let mut op = operator(model, params, mask, batch)?;
    op.shift = -dom.value;
    let (_, v, it, conv, hist) = power(&op, start_vector(mask, seed)?, cfg)?;
    finish(&op, params, v, it + dom.iterations, conv, hist)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub trace: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Rademacher probe `draw`, zero at masked coordinates.
pub fn rademacher_probe(mask: &PruningMask, seed: u64, draw: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, &[rng::label::TRACE, draw]);
    (0..mask.len())
        .map(|i| {
            let s = if r.random::<bool>() { 1.0 } else { -1.0 };
            if mask.is_kept(i) {
                s
            } else {
                0.0
            }
        })
        .collect()
}

/// Hutchinson estimate of `tr(H)` over the unmasked subspace.
pub fn trace_estimate<M: Model>(
    model: &M,
    params: &ParamVector,
    mask: &PruningMask,
    batch: &Batch,
    k: usize,
    seed: u64,
) -> Result<TraceEstimate> {
    if k < 2 {
        return Err(Error::invalid("trace estimate needs at least 2 probes"));
    }
    let op = operator(model, params, mask, batch)?;
    let quads = (0..k as u64)
        .into_par_iter()
        .map(|d| {
            let z = rademacher_probe(mask, seed, d);
            op.apply(&z).map(|hz| dot(&z, &hz))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, se) = mean_and_se(&quads);
    Ok(TraceEstimate {
        trace: mean,
        std_error: se,
        samples: k,
    })
}

pub(crate) fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicePoint {
    pub t: f64,
    pub loss: f64,
}

/// Loss along `θ + t·(m⊙v)` for `points` evenly spaced `t ∈ [−r, r]`.
/// With an odd point count the middle row is `t = 0` exactly.
pub fn landscape_slice<M: Model>(
    model: &M,
    params: &ParamVector,
    mask: &PruningMask,
    batch: &Batch,
    direction: &ParamVector,
    radius: f64,
    points: usize,
) -> Result<Vec<SlicePoint>> {
    params.check_aligned(direction, "direction")?;
    if points < 2 || !(radius > 0.0) {
        return Err(Error::invalid("slice needs at least 2 points and a positive radius"));
    }
    let dir = mask.apply(direction)?;
    let n = dir.norm2();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "slice direction must be unit-norm on the unmasked support, got {n}"
        )));
    }
    let last = (points - 1) as f64;
    let ts: Vec<f64> = (0..points)
        .map(|i| radius * (2.0 * i as f64 - last) / last)
        .collect();
    ts.into_par_iter()
        .map(|t| {
            let v: Vec<f64> = params
                .values()
                .iter()
                .zip(dir.values())
                .map(|(x, d)| x + t * d)
                .collect();
            let loss = forward(model, &params.with_values(v)?, mask, batch)?.loss;
            Ok(SlicePoint { t, loss })
        })
        .collect()
}

pub fn write_slice_csv<W: Write>(out: W, rows: &[SlicePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "loss"])?;
    for r in rows {
        w.write_record([r.t.to_string(), r.loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_slice_csv(path: &Path, rows: &[SlicePoint]) -> Result<()> {
    write_slice_csv(std::fs::File::create(path)?, rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub top_eigenvalue: f64,
    pub eigen_residual: f64,
    pub eigen_iterations: usize,
    pub eigen_converged: bool,
    pub trace: f64,
    pub trace_std_error: f64,
    pub trace_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct CurvatureConfig {
    pub power: PowerConfig,
    pub trace_samples: usize,
    pub slice_radius: f64,
    pub slice_points: usize,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        CurvatureConfig {
            power: PowerConfig::default(),
            trace_samples: 100,
            slice_radius: 1.0,
            slice_points: 41,
        }
    }
}

pub fn curvature_report<M: Model>(
    model: &M,
    params: &ParamVector,
    mask: &PruningMask,
    batch: &Batch,
    cfg: &CurvatureConfig,
    seed: u64,
) -> Result<(CurvatureReport, Eigenpair)> {
    let eig = top_eigenpair(model, params, mask, batch, &cfg.power, seed)?;
    let tr = trace_estimate(model, params, mask, batch, cfg.trace_samples, seed)?;
    let report = CurvatureReport {
        top_eigenvalue: eig.value,
        eigen_residual: eig.residual,
        eigen_iterations: eig.iterations,
        eigen_converged: eig.converged,
        trace: tr.trace,
        trace_std_error: tr.std_error,
        trace_samples: tr.samples,
        seed,
    };
    Ok((report, eig))
}
