//! Reverse-mode differentiation over the closed op set.
//!
//! Every op evaluates eagerly and appends one node. Parameters enter as
//! borrowed leaves, so binding a model to a tape copies nothing.
//! [`Tape::backward`] consumes the tape and walks the nodes in exact reverse
//! order.

use std::borrow::Cow;

use super::backward::{
    backward_affine, backward_conv2d, backward_depthwise_conv3x3, backward_gelu, backward_matmul,
    backward_row_bias, backward_softmax_rows, backward_xnorm, cross_entropy,
};
use crate::attention::xnorm;
use crate::error::{Error, Result};
use crate::tensor::ops::{add_row_bias, affine, matmul_t};
use crate::tensor::{conv2d, depthwise_conv3x3, gelu, matmul, softmax_rows, transpose2d, Element, Gamma, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Element> {
    Leaf,
    MatMul(Var, Var),
    MatMulTn(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    RowBias(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Affine { x: Var, scale: Var, shift: Var },
    XnormRows { x: Var, gamma: Var, head: usize, eps: T },
    SoftmaxRows(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, padding: usize },
    DwConv { x: Var, w: Var, b: Var },
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    CrossEntropy { logits: Var, grad: Vec<T> },
}

pub struct Tape<'a, T: Element> {
    values: Vec<Cow<'a, Tensor<T>>>,
    ops: Vec<Op<T>>,
    macs: u64,
}

impl<T: Element> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by tape variable.
#[derive(Debug)]
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Removes and returns the gradient of `v`, or zeros shaped like `like`
    /// when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<'a, T: Element> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Multiply-accumulates performed by matmul, convolution and normalization
    /// ops recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.push(Cow::Owned(value), op)
    }

    /// A leaf that borrows an existing tensor (typically a parameter).
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf)
    }

    /// A leaf that owns its value (inputs, constants).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push_owned(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let (m, k) = self.value(a).dims2("matmul")?;
        self.macs += (m * k * out.shape()[1]) as u64;
        Ok(self.push_owned(out, Op::MatMul(a, b)))
    }

    /// `aᵀ·b` without materializing the transpose.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_t(self.value(a), true, self.value(b), false)?;
        let (k, m) = self.value(a).dims2("matmul_tn")?;
        self.macs += (m * k * out.shape()[1]) as u64;
        Ok(self.push_owned(out, Op::MatMulTn(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = transpose2d(self.value(a))?;
        Ok(self.push_owned(out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push_owned(out, Op::Add(a, b)))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = add_row_bias(self.value(x), self.value(b))?;
        Ok(self.push_owned(out, Op::RowBias(x, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).scale(c);
        self.push_owned(out, Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = gelu(self.value(x));
        self.push_owned(out, Op::Gelu(x))
    }

    pub fn affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let out = affine(self.value(x), self.value(scale), self.value(shift))?;
        Ok(self.push_owned(out, Op::Affine { x, scale, shift }))
    }

    /// Row-wise XNorm of a 2-D value, scaled by element `head` of `gamma`.
    pub fn xnorm_rows(&mut self, x: Var, gamma: Var, head: usize, eps: T) -> Result<Var> {
        let g = *self
            .value(gamma)
            .data()
            .get(head)
            .ok_or_else(|| Error::Shape(format!("no gamma for head {head}")))?;
        self.value(x).dims2("xnorm_rows")?;
        let out = xnorm(self.value(x), g, eps)?;
        self.macs += out.numel() as u64;
        Ok(self.push_owned(out, Op::XnormRows { x, gamma, head, eps }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x))?;
        Ok(self.push_owned(out, Op::SoftmaxRows(x)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = conv2d(self.value(x), self.value(w), Some(self.value(b)), stride, padding)?;
        let ws = self.value(w).shape();
        self.macs += (out.numel() * ws[1] * ws[2] * ws[3]) as u64;
        Ok(self.push_owned(out, Op::Conv2d { x, w, b, stride, padding }))
    }

    pub fn dwconv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = depthwise_conv3x3(self.value(x), self.value(w), Some(self.value(b)))?;
        self.macs += (out.numel() * 9) as u64;
        Ok(self.push_owned(out, Op::DwConv { x, w, b }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push_owned(out, Op::Reshape(x)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).cols(start, len)?;
        Ok(self.push_owned(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&refs)?;
        Ok(self.push_owned(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).rows(start, len)?;
        Ok(self.push_owned(out, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&refs)?;
        Ok(self.push_owned(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Cross-entropy of a single row of logits (any shape with one row's worth
    /// of elements) against `label`. Produces a one-element value.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (loss, grad) = cross_entropy(self.value(logits).data(), label)?;
        let out = Tensor::from_vec([1], vec![loss])?;
        Ok(self.push_owned(out, Op::CrossEntropy { logits, grad }))
    }

    /// Back-propagates from the one-element value `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let Some(lv) = self.values.get(loss.0) else {
            return Err(Error::Tape(format!("variable {} is not on this tape", loss.0)));
        };
        if lv.numel() != 1 {
            return Err(Error::Tape(format!("loss must be a scalar, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        let val = |v: Var| -> &Tensor<T> { &self.values[v.0] };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = backward_matmul(&g, val(*a), val(*b))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::MatMulTn(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = matmul_t(val(b), false, &g, true)?;
                    let gb = matmul_t(val(a), false, &g, false)?;
                    accumulate(&mut grads, a, ga)?;
                    accumulate(&mut grads, b, gb)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, transpose2d(&g)?)?,
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::RowBias(x, b) => {
                    accumulate(&mut grads, *b, backward_row_bias(&g)?)?;
                    accumulate(&mut grads, *x, g)?;
                }
                Op::Scale(x, c) => accumulate(&mut grads, *x, g.scale(*c))?,
                Op::Gelu(x) => accumulate(&mut grads, *x, backward_gelu(&g, val(*x))?)?,
                Op::Affine { x, scale, shift } => {
                    let (gx, gs, gb) = backward_affine(&g, val(*x), val(*scale))?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *scale, gs)?;
                    accumulate(&mut grads, *shift, gb)?;
                }
                Op::XnormRows { x, gamma, head, eps } => {
                    let gv = val(*gamma);
                    let (gx, per_row) = backward_xnorm(&g, val(*x), 1, Gamma::Scalar(gv.data()[*head]), *eps)?;
                    let mut gg = Tensor::zeros(gv.shape().to_vec());
                    gg.data_mut()[*head] = per_row.into_iter().sum();
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gamma, gg)?;
                }
                Op::SoftmaxRows(x) => {
                    let y = val(Var(i));
                    accumulate(&mut grads, *x, backward_softmax_rows(&g, y)?)?;
                }
                Op::Conv2d { x, w, b, stride, padding } => {
                    let (gx, gw, gb) = backward_conv2d(&g, val(*x), val(*w), *stride, *padding)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::DwConv { x, w, b } => {
                    let (gx, gw, gb) = backward_depthwise_conv3x3(&g, val(*x), val(*w))?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Reshape(x) => {
                    let gx = g.reshape(val(*x).shape().to_vec())?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::SliceCols { x, start } => {
                    let src = val(*x);
                    let (m, n) = src.dims2("slice_cols")?;
                    let w = g.shape()[1];
                    let mut gx = Tensor::zeros([m, n]);
                    for (r, row) in g.data().chunks(w).enumerate() {
                        gx.data_mut()[r * n + start..r * n + start + w].copy_from_slice(row);
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = val(*p).shape()[1];
                        accumulate(&mut grads, *p, g.cols(offset, w)?)?;
                        offset += w;
                    }
                }
                Op::SliceRows { x, start } => {
                    let src = val(*x);
                    let (m, n) = src.dims2("slice_rows")?;
                    let mut gx = Tensor::zeros([m, n]);
                    gx.data_mut()[start * n..start * n + g.numel()].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let m = val(*p).shape()[0];
                        accumulate(&mut grads, *p, g.rows(offset, m)?)?;
                        offset += m;
                    }
                }
                Op::CrossEntropy { logits, grad } => {
                    let up = g.data()[0];
                    let gl = Tensor::from_vec(
                        val(*logits).shape().to_vec(),
                        grad.iter().map(|&x| x * up).collect(),
                    )?;
                    accumulate(&mut grads, *logits, gl)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}
