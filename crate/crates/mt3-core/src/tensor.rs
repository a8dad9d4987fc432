//! Dense n-dimensional value type.
//!
//! A `Tensor` is an immutable shape + flat row-major buffer. Graph nodes hold
//! tensors as their values; detached tensors are plain data, safe to share
//! across threads. Rank-0 (shape `[]`) is a scalar with one element.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<[T]>,
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::InvalidArgument {
                op: "tensor",
                msg: format!(
                    "shape {:?} implies {} elements, buffer has {}",
                    shape,
                    numel_of(&shape),
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape,
            data: data.into(),
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v].into(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel_of(shape)].into(),
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel_of(shape)].into(),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = numel_of(shape);
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect::<Vec<_>>().into(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Sole element of a scalar (or single-element) tensor.
    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Same buffer under a different shape (no copy).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        if numel_of(&shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect::<Vec<_>>().into(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast element type (f32 <-> f64) for precision-mode boundaries.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(<T as Scalar>::to_f64(*v)))
                .collect::<Vec<_>>()
                .into(),
        }
    }

    pub fn l2_norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_buffer_agreement_is_enforced() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn reshape_shares_buffer() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4]).is_err());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[]), Vec::<usize>::new());
    }
}
