//! Dense 4-D tensors in (batch, channel, row, col) layout.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Tensor extent as `[n, c, h, w]`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements in one spatial plane.
    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c() + c) * self.h() + h) * self.w() + w
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n},{c},{h},{w})")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Immutable row-major tensor of `f64`. Cloning shares the buffer.
///
/// Construction through [`Tensor::new`] rejects NaN and infinities; the
/// kernels in [`crate::ops`] assume finite inputs.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "buffer of {} elements does not fit shape {shape}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {pos}")));
        }
        Ok(Self::from_parts(shape, data))
    }

    /// Skips the finiteness scan. Kernels use this for outputs they
    /// produce from finite inputs.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::from_parts(shape, vec![0.0; shape.numel()])
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        Self::from_parts(shape, vec![value; shape.numel()])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(Shape::new(1, 1, 1, 1), vec![value])
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n() {
            for c in 0..shape.c() {
                for h in 0..shape.h() {
                    for w in 0..shape.w() {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.offset(n, c, h, w)]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(format!("expected a scalar, got {}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.numel() {
            return Err(Error::shape(format!("cannot reshape {} to {shape}", self.shape)));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Applies `f` elementwise; fails if any result is non-finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Items `range` along the batch axis.
    pub fn slice_batch(&self, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.shape.n() {
            return Err(Error::shape(format!(
                "batch range {range:?} out of bounds for {}",
                self.shape
            )));
        }
        let item = self.numel() / self.shape.n().max(1);
        let data = self.data[range.start * item..range.end * item].to_vec();
        let [_, c, h, w] = self.shape.0;
        Ok(Self::from_parts(Shape::new(range.len(), c, h, w), data))
    }

    /// Channels `range` of every item.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Self> {
        let [n, c, h, w] = self.shape.0;
        if range.start > range.end || range.end > c {
            return Err(Error::shape(format!(
                "channel range {range:?} out of bounds for {}",
                self.shape
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * range.len() * plane);
        for item in 0..n {
            let base = item * c * plane;
            data.extend_from_slice(&self.data[base + range.start * plane..base + range.end * plane]);
        }
        Ok(Self::from_parts(Shape::new(n, range.len(), h, w), data))
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty list"))?;
        let [_, c, h, w] = first.shape.0;
        let mut n = 0;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::numel).sum());
        for t in items {
            let [tn, tc, th, tw] = t.shape.0;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::shape(format!(
                    "cannot stack {} onto {}",
                    t.shape, first.shape
                )));
            }
            n += tn;
            data.extend_from_slice(t.data());
        }
        Ok(Self::from_parts(Shape::new(n, c, h, w), data))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Byte-level equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{} [", self.shape)?;
        for (i, v) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.numel() > PREVIEW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
