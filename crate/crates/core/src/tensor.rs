use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Scalar type used throughout the model.
pub type Real = f64;

/// Dense row-major n-dimensional array.
///
/// Scalars are stored with shape `[1]`; every dimension is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument {
                op: "tensor",
                msg: alloc::format!("dimensions must be positive, got {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: Real) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0));
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> Real) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    pub fn at(&self, index: &[usize]) -> Real {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: Real) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Same data under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[Real] {
        assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as Real);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.at(&[0, 1, 0]), 4.0);
    }
}
