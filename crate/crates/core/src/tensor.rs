//! Dense rank-4 feature maps in `(batch, channel, row, col)` layout.

use crate::{Error, Result};

/// A rank-4 real tensor stored row-major as a flat `f64` buffer.
///
/// This is the value type that crosses module boundaries; the autodiff tape
/// keeps its own buffers and only borrows or clones these at entry/exit.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Vec<f64>,
    /// `(batch, channels, height, width)`.
    pub shape: [usize; 4],
}

impl FeatureMap {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::config(format!(
                "feature map shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(FeatureMap { data, shape })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let n = shape.iter().product();
        FeatureMap { data: vec![0.0; n], shape }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [b, c, h, w] = shape;
        let mut data = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        data.push(f(bi, ci, i, j));
                    }
                }
            }
        }
        FeatureMap { data, shape }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, i: usize, j: usize) -> f64 {
        let [_, ch, h, w] = self.shape;
        self.data[((b * ch + c) * h + i) * w + j]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, i: usize, j: usize) -> &mut f64 {
        let [_, ch, h, w] = self.shape;
        &mut self.data[((b * ch + c) * h + i) * w + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
