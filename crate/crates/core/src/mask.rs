use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// A single-plane binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

/// Pixel coordinate as (row, col).
pub type Pixel = (usize, usize);

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{} mask values for a {height}x{width} plane",
                data.len()
            )));
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        BinaryMask { height, width, data }
    }

    /// Reads a plane of 0/1 values; anything else is rejected.
    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(format!(
                "{} mask values for a {height}x{width} plane",
                values.len()
            )));
        }
        let data = values
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    Ok(false)
                } else if v == 1.0 {
                    Ok(true)
                } else {
                    Err(Error::invalid(format!("mask value {v} is not binary")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(BinaryMask { height, width, data })
    }

    /// Plane `(item, channel)` of a binary tensor.
    pub fn from_tensor_plane(t: &Tensor, item: usize, channel: usize) -> Result<Self> {
        let s = t.shape();
        if item >= s.n() || channel >= s.c() {
            return Err(Error::shape(format!("plane ({item},{channel}) outside {s}")));
        }
        let start = s.offset(item, channel, 0, 0);
        Self::from_values(s.h(), s.w(), &t.data()[start..start + s.plane()])
    }

    /// Thresholds a probability plane: foreground where `p >= threshold`.
    pub fn threshold(height: usize, width: usize, probs: &[f64], threshold: f64) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::shape("probability plane does not match mask size"));
        }
        Ok(BinaryMask { height, width, data: probs.iter().map(|&p| p >= threshold).collect() })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            Shape::new(1, 1, self.height, self.width),
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}
