//! Dense n-dimensional tensors.
//!
//! Values are stored flat in row-major order. The value type is `f32` for
//! all training, with `f64` available for gradient checking through the same
//! code paths.

use crate::error::{Error, Result};
use crate::scalar::Element;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    /// Builds a tensor from a shape and a flat row-major buffer.
    ///
    /// Rejects empty dimensions, shape/buffer length mismatch, and non-finite
    /// values: finiteness is an invariant of stored tensors, so NaN/Inf is an
    /// error path rather than a representable state.
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "tensor shape {shape:?} contains a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements but buffer holds {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value at flat index {bad}"
            )));
        }
        Ok(Self { shape, data })
    }

    /// Like [`Tensor::new`] but skips the finiteness scan. For internal op
    /// outputs, where divergence is caught at the loss instead.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![E::ZERO; numel],
        }
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: E) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// The four dimensions of an NCHW tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Dimension(format!(
                "expected a 4-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// The two dimensions of a matrix tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension(format!(
                "expected a 2-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Dimension(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({numel} elements)",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    /// True when both tensors hold bit-identical buffers. Stricter than
    /// `==` (distinguishes -0.0 from 0.0); the frozen-parameter contract is
    /// stated at this level.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.bits() == b.bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Casts elements through f64 into another element type.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Flat offset of `(n, c, h, w)` in a row-major NCHW buffer.
#[inline]
pub fn offset4(dims: (usize, usize, usize, usize), n: usize, c: usize, h: usize, w: usize) -> usize {
    let (_, cc, hh, ww) = dims;
    ((n * cc + c) * hh + h) * ww + w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_shape_product() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0f32; 5]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 0], vec![]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0f32, f32::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f32::INFINITY]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn bit_eq_distinguishes_signed_zero() {
        let a = Tensor::new(vec![1], vec![0.0f32]).unwrap();
        let b = Tensor::new(vec![1], vec![-0.0f32]).unwrap();
        assert_eq!(a, b);
        assert!(!a.bit_eq(&b));
        assert!(a.bit_eq(&a));
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn offset4_is_row_major() {
        let dims = (2, 3, 4, 5);
        assert_eq!(offset4(dims, 0, 0, 0, 0), 0);
        assert_eq!(offset4(dims, 0, 0, 0, 1), 1);
        assert_eq!(offset4(dims, 0, 0, 1, 0), 5);
        assert_eq!(offset4(dims, 0, 1, 0, 0), 20);
        assert_eq!(offset4(dims, 1, 0, 0, 0), 60);
    }
}
