//! Dense rank-4 tensors and a reverse-mode tape covering the operations the
//! segmentation network needs.

mod kernels;
mod tape;

pub use tape::{bce_mean, BnMode, Gradients, Tape, Var, PROB_CLAMP};

use crate::error::{Error, Result};

/// `(batch, channels, height, width)`.
pub type Shape = [usize; 4];

/// Dense row-major `f32` tensor of rank 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        let expected = numel(shape);
        if data.len() != expected {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    /// 1-D parameter vector stored as `[len, 1, 1, 1]`.
    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: [data.len(), 1, 1, 1],
            data,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let [_, ch, h, w] = self.shape;
        self.data[((n * ch + c) * h + y) * w + x]
    }

    /// Copies batch entries `range` into a new tensor.
    pub fn slice_batch(&self, range: std::ops::Range<usize>) -> Tensor {
        let [_, c, h, w] = self.shape;
        let per = c * h * w;
        Tensor {
            shape: [range.len(), c, h, w],
            data: self.data[range.start * per..range.end * per].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(op.to_string()))
        }
    }
}

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}
