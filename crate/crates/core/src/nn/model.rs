use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::batch::Batch;
use crate::nn::params::{Layout, ParamVector, SegmentKind};
use crate::nn::scalar::Scalar;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;

pub struct ModelOutput {
    /// Scalar training loss.
    pub loss: Var,
    /// `(n×classes)` logits, for models that classify.
    pub logits: Option<Var>,
}

/// A differentiable objective over a registered parameter vector.
///
/// `params` holds one tape input per layout segment, in layout order, already
/// multiplied by the mask or gate.
pub trait Model: Sync {
    fn layout(&self) -> &Arc<Layout>;

    fn build<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        batch: &Batch,
    ) -> Result<ModelOutput>;
}

/// `½ θᵀAθ` with `A = diag(c)` or `A = LᵀL`. Ignores the batch; used as a
/// closed-form test objective for optimizers and curvature tools.
#[derive(Clone, Debug)]
pub struct Quadratic {
    layout: Arc<Layout>,
    form: QuadForm,
}

#[derive(Clone, Debug)]
enum QuadForm {
    Diagonal(Vec<f64>),
    Factor(Tensor<f64>),
}

impl Quadratic {
    pub fn diagonal(coeffs: Vec<f64>) -> Result<Self> {
        let layout = Layout::packed([("theta", vec![coeffs.len()], SegmentKind::Weight)])?;
        Ok(Quadratic {
            layout: Arc::new(layout),
            form: QuadForm::Diagonal(coeffs),
        })
    }

    /// `A = LᵀL` for a `(k×n)` factor `L`; always positive semidefinite.
    pub fn from_factor(factor: Tensor<f64>) -> Result<Self> {
        let (_, n) = factor
            .dims2()
            .ok_or_else(|| Error::invalid("factor must be a matrix"))?;
        let layout = Layout::packed([("theta", vec![n], SegmentKind::Weight)])?;
        Ok(Quadratic {
            layout: Arc::new(layout),
            form: QuadForm::Factor(factor),
        })
    }

    pub fn params(&self, values: Vec<f64>) -> Result<ParamVector> {
        ParamVector::new(self.layout.clone(), values)
    }

    /// Dense `A`, row-major.
    pub fn matrix(&self) -> Vec<f64> {
        let n = self.layout.len();
        let mut a = vec![0.0; n * n];
        match &self.form {
            QuadForm::Diagonal(c) => {
                for (i, &ci) in c.iter().enumerate() {
                    a[i * n + i] = ci;
                }
            }
            QuadForm::Factor(l) => {
                let (k, _) = l.dims2().unwrap();
                let d = l.data();
                for i in 0..n {
                    for j in 0..n {
                        a[i * n + j] = (0..k).map(|r| d[r * n + i] * d[r * n + j]).sum();
                    }
                }
            }
        }
        a
    }
}

impl Model for Quadratic {
    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn build<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        _batch: &Batch,
    ) -> Result<ModelOutput> {
        let theta = params[0];
        let quad = match &self.form {
            QuadForm::Diagonal(c) => {
                let c = tape.input(Tensor::from_parts(vec![c.len()], c.iter().map(|&x| T::from_f64(x)).collect()));
                let sq = tape.mul(theta, theta)?;
                let w = tape.mul(sq, c)?;
                tape.sum(w)
            }
            QuadForm::Factor(l) => {
                let l = tape.input(l.map(T::from_f64));
                let lt = tape.matmul(l, theta)?;
                let sq = tape.mul(lt, lt)?;
                tape.sum(sq)
            }
        };
        Ok(ModelOutput {
            loss: tape.scale(quad, 0.5),
            logits: None,
        })
    }
}
