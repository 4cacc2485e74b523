//! Dense `f64` tensors and reverse-mode gradients for the fixed layer
//! set the networks use: dense, 3x3 same-padded convolution, 2x2 max
//! pooling, ReLU, plus the handful of scalar/loss nodes training needs.

mod gradcheck;
pub mod ops;
mod tape;

pub use gradcheck::gradient_check;
pub use tape::{ParamId, Tape, ValueId};

use crate::{Error, Result};

/// N-dimensional array of 64-bit floats in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    /// Builds a tensor from explicit contents.
    ///
    /// Fails unless `product(shape) == data.len()` and every dimension is
    /// positive.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// One-element tensor holding `value`.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "expected a scalar tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row-major index of the maximum of row `r` of a 2-D tensor; ties go
    /// to the lowest index.
    pub fn argmax_row(&self, r: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        let k = self.shape[1];
        let row = &self.data[r * k..(r + 1) * k];
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

/// A trainable tensor: value plus gradient and momentum buffers of the
/// same shape.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub gradient: Tensor,
    pub velocity: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let gradient = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Parameter { value, gradient, velocity }
    }

    pub fn zero_gradients(&mut self) {
        self.gradient.data_mut().fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_element_count() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn parameter_buffers_share_shape() {
        let p = Parameter::new(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(p.value.shape(), p.gradient.shape());
        assert_eq!(p.value.shape(), p.velocity.shape());
        assert!(p.gradient.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let t = Tensor::from_vec(&[1, 3], vec![5.0, 5.0, 1.0]).unwrap();
        assert_eq!(t.argmax_row(0), 0);
    }
}
