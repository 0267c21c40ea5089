//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its value and its inputs, so
//! the tape is topologically ordered by construction and backward is a
//! single reverse sweep.

use crate::error::{Error, Result};
use crate::loss;
use crate::ops::{self, PoolIndices};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, padding: usize },
    Relu(Var),
    Sigmoid(Var),
    MaxPool { input: Var, indices: PoolIndices },
    MaxUnpool { input: Var, indices: PoolIndices },
    Concat { a: Var, b: Var },
    SliceChannels { input: Var, start: usize },
    Sum(Var),
    Mul(Var, Var),
    Wce { pred: Var, target: Tensor, weights: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass. Not shareable across threads
/// while recording; build one tape per pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(input), self.value(kernel), self.value(bias), padding)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(y, Op::Conv2d { input, kernel, bias, padding }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Sigmoid(x), rg)
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<(Var, PoolIndices)> {
        let (y, indices) = ops::maxpool2x2(self.value(x))?;
        let rg = self.any_grad(&[x]);
        let out = self.push(y, Op::MaxPool { input: x, indices: indices.clone() }, rg);
        Ok((out, indices))
    }

    pub fn maxunpool2x2(&mut self, x: Var, indices: &PoolIndices, out_hw: (usize, usize)) -> Result<Var> {
        let y = ops::maxunpool2x2(self.value(x), indices, out_hw)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::MaxUnpool { input: x, indices: indices.clone() }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Concat { a, b }, rg))
    }

    pub fn slice_channels(&mut self, x: Var, range: std::ops::Range<usize>) -> Result<Var> {
        let start = range.start;
        let y = self.value(x).slice_channels(range)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(y, Op::SliceChannels { input: x, start }, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::from_parts(Shape::new(1, 1, 1, 1), vec![self.value(x).sum()]);
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Sum(x), rg)
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!("mul: {} vs {}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let y = Tensor::new(ta.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    /// Weighted binary cross-entropy of `pred` against constant targets.
    pub fn wce_loss(&mut self, pred: Var, target: &Tensor, weights: &Tensor) -> Result<Var> {
        let value = loss::wce_loss(self.value(pred), target, weights)?;
        let y = Tensor::scalar(value)?;
        let rg = self.any_grad(&[pred]);
        Ok(self.push(
            y,
            Op::Wce { pred, target: target.clone(), weights: weights.clone() },
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) back through the tape.
    ///
    /// Gradients of nodes used more than once are summed. Only nodes that
    /// require a gradient are visited.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Autodiff(format!("{loss:?} is not on this tape")))?;
        if node.value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Autodiff(
                "loss does not depend on any trainable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let g = Tensor::from_parts(node.value.shape(), g);
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g.into_vec());
                    continue;
                }
                Op::Conv2d { input, kernel, bias, padding } => {
                    let want_input = self.requires_grad(*input);
                    let cg = ops::conv2d_backward(
                        self.value(*input),
                        self.value(*kernel),
                        self.value(*bias).shape(),
                        *padding,
                        &g,
                        want_input,
                    )?;
                    if let Some(gi) = cg.input {
                        self.accumulate(&mut grads, *input, &gi);
                    }
                    self.accumulate(&mut grads, *kernel, &cg.kernel);
                    self.accumulate(&mut grads, *bias, &cg.bias);
                }
                Op::Relu(x) => {
                    let gx = ops::relu_backward(self.value(*x), &g);
                    self.accumulate(&mut grads, *x, &gx);
                }
                Op::Sigmoid(x) => {
                    let gx = ops::sigmoid_backward(&node.value, &g);
                    self.accumulate(&mut grads, *x, &gx);
                }
                Op::MaxPool { input, indices } => {
                    let [_, _, h, w] = self.value(*input).shape().0;
                    let gx = ops::maxunpool2x2(&g, indices, (h, w))?;
                    self.accumulate(&mut grads, *input, &gx);
                }
                Op::MaxUnpool { input, indices } => {
                    let gx = ops::gather_pooled(&g, indices)?;
                    self.accumulate(&mut grads, *input, &gx);
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).shape().c();
                    let c = node.value.shape().c();
                    self.accumulate(&mut grads, *a, &g.slice_channels(0..ca)?);
                    self.accumulate(&mut grads, *b, &g.slice_channels(ca..c)?);
                }
                Op::SliceChannels { input, start } => {
                    let src = self.value(*input).shape();
                    let [n, c, h, w] = g.shape().0;
                    let plane = h * w;
                    let mut gx = vec![0.0; src.numel()];
                    for item in 0..n {
                        let dst = item * src.c() * plane + start * plane;
                        gx[dst..dst + c * plane]
                            .copy_from_slice(&g.data()[item * c * plane..(item + 1) * c * plane]);
                    }
                    self.accumulate(&mut grads, *input, &Tensor::from_parts(src, gx));
                }
                Op::Sum(x) => {
                    let seed = g.data()[0];
                    let gx = Tensor::from_parts(self.value(*x).shape(), vec![seed; self.value(*x).numel()]);
                    self.accumulate(&mut grads, *x, &gx);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga: Vec<f64> = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(&mut grads, *a, &Tensor::from_parts(ta.shape(), ga));
                    self.accumulate(&mut grads, *b, &Tensor::from_parts(tb.shape(), gb));
                }
                Op::Wce { pred, target, weights } => {
                    let mut gp = loss::wce_grad(self.value(*pred), target, weights)?.into_vec();
                    let seed = g.data()[0];
                    gp.iter_mut().for_each(|v| *v *= seed);
                    self.accumulate(&mut grads, *pred, &Tensor::from_parts(self.value(*pred).shape(), gp));
                }
            }
        }

        let leaves = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let keep = matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad;
                match (keep, g) {
                    (true, Some(g)) => Some(Tensor::from_parts(self.nodes[i].value.shape(), g)),
                    (true, None) => Some(Tensor::zeros(self.nodes[i].value.shape())),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, g: &Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.data().to_vec()),
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a trainable leaf. Leaves the loss does not depend on
    /// get an all-zero gradient; constants and interior nodes get `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[f64]) -> Tensor {
        Tensor::new(Shape::new(1, 1, 1, values.len()), values.to_vec()).unwrap()
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::new(2, 3, 2, 2), 0.7));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(row(&[1.0, -2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn relu_gradient_is_indicator() {
        let mut tape = Tape::new();
        let x = tape.leaf(row(&[-1.0, 3.0, 0.0]));
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_gradient_splits() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(Shape::new(1, 2, 2, 2), 1.0));
        let b = tape.leaf(Tensor::full(Shape::new(1, 3, 2, 2), 2.0));
        let ab = tape.concat_channels(a, b).unwrap();
        let b_half = tape.slice_channels(ab, 2..5).unwrap();
        let s = tape.sum(b_half);
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.get(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_non_scalar_and_detached_losses() {
        let mut tape = Tape::new();
        let x = tape.leaf(row(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Autodiff(_))));
        let c = tape.constant(row(&[1.0]));
        let s = tape.sum(c);
        assert!(matches!(tape.backward(s), Err(Error::Autodiff(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(row(&[1.0, 2.0]));
        let c = tape.constant(row(&[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
        assert!(g.get(p).is_none());
    }
}
