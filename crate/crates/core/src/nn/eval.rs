//! Masked evaluation: loss, gradient and Hessian-vector products of
//! `L(g ⊙ θ)` where `g` is a 0/1 mask or a real-valued gate.

use crate::error::{Error, Result};
use crate::masking::PruningMask;
use crate::nn::batch::Batch;
use crate::nn::model::Model;
use crate::nn::params::ParamVector;
use crate::nn::scalar::{Dual, Scalar};
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Forward {
    pub loss: f64,
    pub logits: Option<Tensor<f64>>,
}

fn check_lengths<M: Model>(model: &M, values: &[f64], gate: &[f64]) -> Result<()> {
    let n = model.layout().len();
    if values.len() != n {
        return Err(Error::shape("params", n, values.len()));
    }
    if gate.len() != n {
        return Err(Error::shape("mask", n, gate.len()));
    }
    Ok(())
}

fn check_params<M: Model>(model: &M, params: &ParamVector, mask: &PruningMask) -> Result<()> {
    if params.len() != model.layout().len() {
        return Err(Error::shape("params", model.layout().len(), params.len()));
    }
    if **params.layout() != **model.layout() {
        // Name the first segment that disagrees.
        let seg = model
            .layout()
            .segments()
            .iter()
            .zip(params.layout().segments())
            .find(|(a, b)| a != b)
            .map(|(a, _)| a.name.clone())
            .unwrap_or_else(|| "params".into());
        return Err(Error::shape(seg, "model registry", "different registry"));
    }
    if mask.len() != params.len() {
        return Err(Error::shape("mask", params.len(), mask.len()));
    }
    Ok(())
}

fn build_tape<M: Model, T: Scalar>(
    model: &M,
    effective: &[T],
    batch: &Batch,
) -> Result<(Tape<T>, Vec<Var>, crate::nn::model::ModelOutput)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = model
        .layout()
        .segments()
        .iter()
        .map(|seg| {
            tape.input(Tensor::from_parts(
                seg.shape.clone(),
                effective[seg.range()].to_vec(),
            ))
        })
        .collect();
    let out = model.build(&mut tape, &vars, batch)?;
    Ok((tape, vars, out))
}

fn gather<M: Model, T: Scalar>(
    model: &M,
    tape: &Tape<T>,
    vars: &[Var],
    root: Var,
) -> Result<Vec<T>> {
    let grads = tape.backward(root)?;
    let mut flat = vec![T::zero(); model.layout().len()];
    for (seg, &v) in model.layout().segments().iter().zip(vars) {
        if let Some(g) = grads.get(v) {
            flat[seg.range()].copy_from_slice(g.data());
        }
    }
    Ok(flat)
}

pub fn forward_gated<M: Model>(
    model: &M,
    values: &[f64],
    gate: &[f64],
    batch: &Batch,
) -> Result<Forward> {
    check_lengths(model, values, gate)?;
    let eff: Vec<f64> = values.iter().zip(gate).map(|(t, g)| g * t).collect();
    let (tape, _, out) = build_tape(model, &eff, batch)?;
    Ok(Forward {
        loss: tape.value(out.loss).data()[0],
        logits: out.logits.map(|v| tape.value(v).clone()),
    })
}

/// Loss and `∂L(g⊙θ)/∂θ = g ⊙ ∇L`.
pub fn loss_and_grad_gated<M: Model>(
    model: &M,
    values: &[f64],
    gate: &[f64],
    batch: &Batch,
) -> Result<(f64, Vec<f64>)> {
    check_lengths(model, values, gate)?;
    let eff: Vec<f64> = values.iter().zip(gate).map(|(t, g)| g * t).collect();
    let (tape, vars, out) = build_tape(model, &eff, batch)?;
    let mut g = gather(model, &tape, &vars, out.loss)?;
    for (gi, m) in g.iter_mut().zip(gate) {
        *gi *= m;
    }
    Ok((tape.value(out.loss).data()[0], g))
}

/// `diag(g)·H·diag(g)·v`, by differentiating the reverse sweep along `v`.
pub fn hvp_gated<M: Model>(
    model: &M,
    values: &[f64],
    gate: &[f64],
    batch: &Batch,
    v: &[f64],
) -> Result<Vec<f64>> {
    check_lengths(model, values, gate)?;
    if v.len() != values.len() {
        return Err(Error::shape("direction", values.len(), v.len()));
    }
    let eff: Vec<Dual> = values
        .iter()
        .zip(gate)
        .zip(v)
        .map(|((t, g), vi)| Dual::new(g * t, g * vi))
        .collect();
    let (tape, vars, out) = build_tape(model, &eff, batch)?;
    let g = gather(model, &tape, &vars, out.loss)?;
    Ok(g.iter().zip(gate).map(|(d, m)| m * d.du).collect())
}

pub fn forward<M: Model>(
    model: &M,
    params: &ParamVector,
    mask: &PruningMask,
    batch: &Batch,
) -> Result<Forward> {
    check_params(model, params, mask)?;
    forward_gated(model, params.values(), &mask.multipliers(), batch)
}

pub fn loss_and_grad<M: Model>(
    model: &M,
    params: &ParamVector,
    mask: &PruningMask,
    batch: &Batch,
) -> Result<(f64, ParamVector)> {
    check_params(model, params, mask)?;
    let (l, g) = loss_and_grad_gated(model, params.values(), &mask.multipliers(), batch)?;
    Ok((l, params.with_values(g)?))
}

/// `∂L(m⊙θ)/∂θ`; exactly zero at masked coordinates.
pub fn grad<M: Model>(
    model: &M,
    params: &ParamVector,
    mask: &PruningMask,
    batch: &Batch,
) -> Result<ParamVector> {
    loss_and_grad(model, params, mask, batch).map(|(_, g)| g)
}

/// Hessian of the masked loss w.r.t. θ applied to `v`. Masked rows and
/// columns of the Hessian are zero. ReLU contributes no second-order term.
pub fn hvp<M: Model>(
    model: &M,
    params: &ParamVector,
    mask: &PruningMask,
    batch: &Batch,
    v: &ParamVector,
) -> Result<ParamVector> {
    check_params(model, params, mask)?;
    params.check_aligned(v, "direction")?;
    let hv = hvp_gated(model, params.values(), &mask.multipliers(), batch, v.values())?;
    params.with_values(hv)
}

/// Fraction of rows whose arg-max logit differs from the label. Ties go to the
/// lowest class index.
pub fn zero_one_error(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let (n, _) = logits.dims2().unwrap();
    let wrong = (0..n)
        .filter(|&i| argmax(logits.row(i)) != labels[i])
        .count();
    wrong as f64 / n as f64
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best
}

/// Loss and 0-1 error in one pass.
pub fn evaluate_gated<M: Model>(
    model: &M,
    values: &[f64],
    gate: &[f64],
    batch: &Batch,
) -> Result<(f64, f64)> {
    let f = forward_gated(model, values, gate, batch)?;
    let logits = f
        .logits
        .ok_or_else(|| Error::invalid("model does not produce logits"))?;
    Ok((f.loss, zero_one_error(&logits, batch.labels())))
}

pub fn evaluate<M: Model>(
    model: &M,
    params: &ParamVector,
    mask: &PruningMask,
    batch: &Batch,
) -> Result<(f64, f64)> {
    check_params(model, params, mask)?;
    evaluate_gated(model, params.values(), &mask.multipliers(), batch)
}
