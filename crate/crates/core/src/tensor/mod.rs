//! Dense `f32` tensors and the reverse-mode tape that differentiates them.
//!
//! Only the operations the denoising network needs are provided. Kernels in
//! [`kernels`] are plain functions over slices; [`GradTape`] records calls to
//! them so that [`GradTape::backward`] can replay the chain rule.

mod kernels;
mod tape;

pub use kernels::{ConvSpec, BN_EPSILON, BN_MOMENTUM, PRELU_INIT};
pub use tape::{BatchStats, BnState, Gradients, GradTape, TensorId};
pub(crate) use kernels::dropout_mask as kernels_dropout_mask;

use std::fmt;

/// Error raised by tensor construction and by every tape operation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        dim: String,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {actual:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        actual: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{op}: unsupported configuration: {reason}")]
    Unsupported { op: &'static str, reason: String },
    #[error("max_pool2: spatial size {h}x{w} is not even")]
    OddSpatial { h: usize, w: usize },
    #[error("batch_norm: eval mode requested but running statistics were never populated")]
    MissingRunningStats,
    #[error("batch_norm: train mode needs at least 2 values per channel, got {0}")]
    BatchTooSmall(usize),
    #[error("dropout: rate {0} outside [0, 1)")]
    InvalidRate(f32),
    #[error("tensor does not belong to this tape")]
    NotOnTape,
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Row-major dense tensor. 4-D tensors use `[batch, channel, height, width]`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        Self {
            data: (0..len).map(&mut f).collect(),
            shape,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data, new shape with the same element count.
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(TensorError::Rank {
                op,
                expected: 4,
                actual: self.shape.clone(),
            }),
        }
    }

    /// Extracts sample `index` along the batch axis of a 4-D tensor as `[C, H, W]`.
    pub fn sample(&self, index: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims4("sample")?;
        if index >= n {
            return Err(TensorError::ShapeMismatch {
                op: "sample",
                dim: "batch index".into(),
                expected: n,
                actual: index,
            });
        }
        let stride = c * h * w;
        Tensor::new(
            vec![c, h, w],
            self.data[index * stride..(index + 1) * stride].to_vec(),
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(TensorError::Rank {
            op: "stack",
            expected: 1,
            actual: vec![],
        })?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    dim: "item shape".into(),
                    expected: first.len(),
                    actual: t.len(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head = &self.data[..self.data.len().min(SHOWN)];
        if self.data.len() > SHOWN {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}

/// Whether layers behave as during training (batch statistics, dropout) or
/// inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(
            err,
            TensorError::DataLength {
                shape: vec![2, 3],
                len: 5
            }
        );
    }

    #[test]
    fn stack_and_sample_are_inverse() {
        let a = Tensor::from_fn(vec![1, 2, 2], |i| i as f32);
        let b = Tensor::from_fn(vec![1, 2, 2], |i| 10.0 + i as f32);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2, 2]);
        assert_eq!(s.sample(1).unwrap(), b);
        assert!(s.sample(2).is_err());
    }
}
