//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive in execution order, so the record is
//! already topologically sorted and the backward pass is a single reverse
//! sweep. A fresh tape is built for every forward pass.
//!
//! ```
//! use planlens_core::autodiff::{BackwardMode, Tape};
//! use planlens_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.leaf(Tensor::scalar(5.0));
//! let f = tape.mul(x, y).unwrap();
//! let grads = tape.backward(f, BackwardMode::Standard).unwrap();
//! assert_eq!(grads.get(x).unwrap().item().unwrap(), 5.0);
//! assert_eq!(grads.get(y).unwrap().item().unwrap(), 3.0);
//! ```

use crate::tensor::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Stack inputs on top of each other (column counts must agree).
    Rows,
    /// Place inputs side by side (row counts must agree).
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackwardMode {
    #[default]
    Standard,
    /// Rectifiers pass only non-negative upstream gradients.
    Guided,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Rectifier(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    MeanRows(Var),
    Concat(Vec<Var>, Axis),
    ScaleRows(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when it does not require gradients.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, with zeros when the output does not depend on it.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn ensure_finite(t: Tensor, op: &'static str) -> Result<Tensor, TensorError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        let out = ensure_finite(out, "matmul")?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let out = ensure_finite(out, "add")?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let out = ensure_finite(out, "sub")?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let out = ensure_finite(out, "mul")?;
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let out = ensure_finite(self.value(a).map(|x| x * factor), "scale")?;
        let rg = self.grad_any(&[a]);
        Ok(self.push(out, Op::Scale(a, factor), rg))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, shift: f64) -> Result<Var, TensorError> {
        let out = ensure_finite(self.value(a).map(|x| x + shift), "offset")?;
        let rg = self.grad_any(&[a]);
        Ok(self.push(out, Op::Offset(a), rg))
    }

    pub fn rectifier(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.grad_any(&[a]);
        Ok(self.push(out, Op::Rectifier(a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(sigmoid);
        let rg = self.grad_any(&[a]);
        Ok(self.push(out, Op::Sigmoid(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = ensure_finite(self.value(a).map(f64::exp), "exp")?;
        let rg = self.grad_any(&[a]);
        Ok(self.push(out, Op::Exp(a), rg))
    }

    /// Natural logarithm; non-positive inputs are a non-finite error.
    pub fn ln(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = ensure_finite(self.value(a).map(f64::ln), "ln")?;
        let rg = self.grad_any(&[a]);
        Ok(self.push(out, Op::Ln(a), rg))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(f64::abs);
        let rg = self.grad_any(&[a]);
        Ok(self.push(out, Op::Abs(a), rg))
    }

    /// Column-wise mean over the rows of `a`, producing a single row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.rows() == 0 {
            return Err(TensorError::Contract("mean_rows of an empty matrix".into()));
        }
        let mut out = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
                *o += v;
            }
        }
        let n = t.rows() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        let rg = self.grad_any(&[a]);
        Ok(self.push(Tensor::row(out), Op::MeanRows(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, TensorError> {
        let Some(first) = parts.first() else {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        };
        let [r0, c0] = self.value(*first).shape();
        let out = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let t = self.value(*p);
                    if t.cols() != c0 {
                        return Err(TensorError::Dimension {
                            op: "concat",
                            left: [r0, c0],
                            right: t.shape(),
                        });
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::new(rows, c0, data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for p in parts {
                    let t = self.value(*p);
                    if t.rows() != r0 {
                        return Err(TensorError::Dimension {
                            op: "concat",
                            left: [r0, c0],
                            right: t.shape(),
                        });
                    }
                    cols += t.cols();
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for r in 0..r0 {
                    for p in parts {
                        data.extend_from_slice(self.value(*p).row_slice(r));
                    }
                }
                Tensor::new(r0, cols, data)?
            }
        };
        let rg = self.grad_any(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Multiplies row `i` of `rows` by `factors[i]`; `factors` is `n×1`.
    ///
    /// This is how node masks are applied to hidden states.
    pub fn scale_rows(&mut self, rows: Var, factors: Var) -> Result<Var, TensorError> {
        let (x, f) = (self.value(rows), self.value(factors));
        if f.shape() != [x.rows(), 1] {
            return Err(TensorError::Dimension {
                op: "scale_rows",
                left: x.shape(),
                right: f.shape(),
            });
        }
        let mut data = x.data().to_vec();
        let cols = x.cols();
        for r in 0..x.rows() {
            let s = f.get(r, 0);
            data[r * cols..(r + 1) * cols]
                .iter_mut()
                .for_each(|v| *v *= s);
        }
        let out = ensure_finite(Tensor::new(x.rows(), cols, data)?, "scale_rows")?;
        let rg = self.grad_any(&[rows, factors]);
        Ok(self.push(out, Op::ScaleRows(rows, factors), rg))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var, mode: BackwardMode) -> Result<Gradients, TensorError> {
        let out_val = self.value(output);
        if out_val.shape() != [1, 1] {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar output, found shape {:?}",
                out_val.shape()
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(Tensor::scalar(1.0));
        }

        for idx in (0..n).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads[idx] = Some(upstream),
                Op::MatMul(a, b) => {
                    if self.requires_grad(*a) {
                        let g = upstream.matmul(&self.value(*b).transpose())?;
                        accumulate(&mut grads, *a, g);
                    }
                    if self.requires_grad(*b) {
                        let g = self.value(*a).transpose().matmul(&upstream)?;
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, upstream.clone());
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, upstream);
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, upstream.clone());
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, upstream.map(|g| -g));
                    }
                }
                Op::Mul(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(
                            &mut grads,
                            *a,
                            upstream.zip_map(self.value(*b), |g, y| g * y),
                        );
                    }
                    if self.requires_grad(*b) {
                        accumulate(
                            &mut grads,
                            *b,
                            upstream.zip_map(self.value(*a), |g, x| g * x),
                        );
                    }
                }
                Op::Scale(a, factor) => {
                    let f = *factor;
                    accumulate(&mut grads, *a, upstream.map(|g| g * f));
                }
                Op::Offset(a) => accumulate(&mut grads, *a, upstream),
                Op::Rectifier(a) => {
                    let g = match mode {
                        BackwardMode::Standard => {
                            upstream.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })
                        }
                        BackwardMode::Guided => upstream.zip_map(self.value(*a), |g, x| {
                            if x > 0.0 && g > 0.0 {
                                g
                            } else {
                                0.0
                            }
                        }),
                    };
                    accumulate(&mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    let g = upstream.zip_map(&node.value, |g, s| g * s * (1.0 - s));
                    accumulate(&mut grads, *a, g);
                }
                Op::Exp(a) => {
                    let g = upstream.zip_map(&node.value, |g, e| g * e);
                    accumulate(&mut grads, *a, g);
                }
                Op::Ln(a) => {
                    let g = upstream.zip_map(self.value(*a), |g, x| g / x);
                    accumulate(&mut grads, *a, g);
                }
                Op::Abs(a) => {
                    let g = upstream.zip_map(self.value(*a), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *a, g);
                }
                Op::MeanRows(a) => {
                    let [rows, cols] = self.value(*a).shape();
                    let inv = 1.0 / rows as f64;
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        data.extend(upstream.data().iter().map(|g| g * inv));
                    }
                    accumulate(&mut grads, *a, Tensor::new(rows, cols, data)?);
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for p in parts {
                        let [pr, pc] = self.value(*p).shape();
                        if self.requires_grad(*p) {
                            let g = match axis {
                                Axis::Rows => Tensor::new(
                                    pr,
                                    pc,
                                    upstream.data()[offset * pc..(offset + pr) * pc].to_vec(),
                                )?,
                                Axis::Cols => {
                                    let mut data = Vec::with_capacity(pr * pc);
                                    for r in 0..pr {
                                        data.extend_from_slice(
                                            &upstream.row_slice(r)[offset..offset + pc],
                                        );
                                    }
                                    Tensor::new(pr, pc, data)?
                                }
                            };
                            accumulate(&mut grads, *p, g);
                        }
                        offset += match axis {
                            Axis::Rows => pr,
                            Axis::Cols => pc,
                        };
                    }
                }
                Op::ScaleRows(rows, factors) => {
                    let x = self.value(*rows);
                    let f = self.value(*factors);
                    let cols = x.cols();
                    if self.requires_grad(*rows) {
                        let mut data = upstream.data().to_vec();
                        for r in 0..x.rows() {
                            let s = f.get(r, 0);
                            data[r * cols..(r + 1) * cols]
                                .iter_mut()
                                .for_each(|v| *v *= s);
                        }
                        accumulate(&mut grads, *rows, Tensor::new(x.rows(), cols, data)?);
                    }
                    if self.requires_grad(*factors) {
                        let data = (0..x.rows())
                            .map(|r| {
                                x.row_slice(r)
                                    .iter()
                                    .zip(upstream.row_slice(r))
                                    .map(|(a, b)| a * b)
                                    .sum()
                            })
                            .collect();
                        accumulate(&mut grads, *factors, Tensor::new(x.rows(), 1, data)?);
                    }
                }
            }
        }

        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape()).collect();
        // Only leaves keep their gradients; intermediates were consumed.
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
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
