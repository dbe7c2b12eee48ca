//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major. Shape `[c, h, w]` for activations and
/// probability maps, `[c_out, c_in, k, k]` for convolution kernels, `[1]` for
/// scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    values: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::ShapeMismatch {
                left: shape,
                right: vec![values.len()],
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![F::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![v; n],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Scalar payload; panics on non-scalars (guarded at call sites).
    pub fn item(&self) -> F {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.values[0]
    }

    /// Flat index for `[c, h, w]` tensors.
    #[inline]
    pub fn idx3(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (c * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn same_shape(&self, other: &Tensor<F>) -> bool {
        self.shape == other.shape
    }

    /// True when every value is finite.
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn idx3_row_major() {
        let t = Tensor::<f64>::zeros(vec![2, 3, 4]);
        assert_eq!(t.idx3(0, 0, 0), 0);
        assert_eq!(t.idx3(0, 1, 0), 4);
        assert_eq!(t.idx3(1, 0, 0), 12);
        assert_eq!(t.idx3(1, 2, 3), 23);
    }
}
