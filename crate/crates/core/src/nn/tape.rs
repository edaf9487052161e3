//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so a single backward sweep in
//! reverse index order visits every node after all of its consumers. The tape
//! is generic over [`Scalar`]; running it over [`Dual`](super::Dual) values
//! differentiates the backward sweep itself (forward-over-reverse).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::scalar::Scalar;
use crate::nn::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sum(Var),
    SoftmaxXent { logits: Var, labels: Arc<[usize]> },
}

pub struct Tape<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(t: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| Error::shape(what, "rank 1 or 2", format!("{:?}", t.shape())))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    /// `(n×k)·(k×m)`. A 1-D right operand is treated as a column.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims(self.value(a), "matmul lhs")?;
        let bt = self.value(b);
        let (k2, m) = if bt.shape().len() == 1 {
            (bt.numel(), 1)
        } else {
            dims(bt, "matmul rhs")?
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dim {k}"), k2));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = ad[i * k + p];
                let brow = &bd[p * m..(p + 1) * m];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b)))
    }

    /// Adds a length-`m` row vector to every row of an `(n×m)` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = dims(self.value(x), "add_row lhs")?;
        if self.value(bias).numel() != m {
            return Err(Error::shape("add_row bias", m, self.value(bias).numel()));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            for (o, &bv) in out[i * m..(i + 1) * m].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(x, bias)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                what,
                format!("{:?}", self.value(a).shape()),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cs = T::from_f64(c);
        let t = self.value(a).map(|x| x * cs);
        self.push(t, Op::Scale(a, c))
    }

    /// `max(x, 0)`. The kink has derivative 0, and the second derivative is 0
    /// everywhere.
    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x.re() > 0.0 { x } else { T::zero() });
        self.push(t, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(Scalar::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let mut s = T::zero();
        for &x in self.value(a).data() {
            s += x;
        }
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean softmax cross-entropy over the rows of an `(n×c)` logit matrix,
    /// computed through log-sum-exp.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = dims(self.value(logits), "softmax_xent logits")?;
        if labels.len() != n {
            return Err(Error::shape("labels", n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!("label {bad} outside [0, {c})")));
        }
        let z = self.value(logits).data();
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &z[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[y];
        }
        let loss = total / T::from_f64(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.into(),
            },
        ))
    }

    /// Reverse sweep from a scalar root. Entry `i` of the result holds the
    /// adjoint of node `i`, or `None` if the root does not depend on it.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(
                "backward root",
                "scalar",
                format!("{:?}", self.value(root).shape()),
            ));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        adj[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            match &self.ops[idx] {
                Op::Input => {
                    adj[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (n, k) = self.value(*a).dims2().unwrap();
                    let m = g.len() / n;
                    let ad = self.value(*a).data();
                    let bd = self.value(*b).data();
                    // dA = dC·Bᵀ
                    let mut da = vec![T::zero(); n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = T::zero();
                            for j in 0..m {
                                s += g[i * m + j] * bd[p * m + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    // dB = Aᵀ·dC
                    let mut db = vec![T::zero(); k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            for j in 0..m {
                                db[p * m + j] += aip * g[i * m + j];
                            }
                        }
                    }
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::AddRow(x, bias) => {
                    let m = self.value(*bias).numel();
                    let mut db = vec![T::zero(); m];
                    for row in g.chunks(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut adj, *x, g);
                    accumulate(&mut adj, *bias, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let da = g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect();
                    let db = g.iter().zip(av).map(|(&gi, &x)| gi * x).collect();
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Scale(a, c) => {
                    let cs = T::from_f64(*c);
                    accumulate(&mut adj, *a, g.into_iter().map(|x| x * cs).collect());
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi.re() > 0.0 { gi } else { T::zero() })
                        .collect();
                    accumulate(&mut adj, *a, d);
                }
                Op::Tanh(a) => {
                    let y = self.values[idx].data();
                    let d = g
                        .iter()
                        .zip(y)
                        .map(|(&gi, &yi)| gi * (T::one() - yi * yi))
                        .collect();
                    accumulate(&mut adj, *a, d);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    accumulate(&mut adj, *a, vec![g[0]; n]);
                }
                Op::SoftmaxXent { logits, labels } => {
                    let (n, c) = self.value(*logits).dims2().unwrap();
                    let z = self.value(*logits).data();
                    let scale = g[0] / T::from_f64(n as f64);
                    let mut d = vec![T::zero(); n * c];
                    for (i, &y) in labels.iter().enumerate() {
                        let row = &z[i * c..(i + 1) * c];
                        let lse = log_sum_exp(row);
                        for j in 0..c {
                            let p = (row[j] - lse).exp();
                            let t = if j == y { p - T::one() } else { p };
                            d[i * c + j] = t * scale;
                        }
                    }
                    accumulate(&mut adj, *logits, d);
                }
            }
        }

        Ok(Gradients {
            grads: adj
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    g.map(|d| Tensor::from_parts(self.values[i].shape().to_vec(), d))
                })
                .collect(),
        })
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(d) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

/// Shift by the primal max; the shift is a constant so it carries no tangent.
fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().map(|x| x.re()).fold(f64::NEG_INFINITY, f64::max);
    let shift = T::from_f64(max);
    let mut s = T::zero();
    for &x in row {
        s += (x - shift).exp();
    }
    shift + s.ln()
}

/// Adjoints produced by [`Tape::backward`]; only inputs keep theirs.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
