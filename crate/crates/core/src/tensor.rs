//! Dense row-major tensors in 64-bit precision.
//!
//! Every constructor validates that the buffer length matches the shape and
//! that all entries are finite. Operations that could produce NaN/Inf go
//! through [`Tensor::new`], so non-finite values surface as errors instead of
//! propagating silently.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, buffer has {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} contains a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { value: f64, index: usize },
}

/// Dense row-major matrix/vector of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting shape/length mismatches and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        // Branchless fast path: with the sign bit masked off, NaN/Inf are
        // exactly the values whose bit patterns reach the exponent mask, so
        // an integer max-reduction (which vectorizes, unlike a float sum)
        // detects them in one pass.
        const ABS_MASK: u64 = !(1 << 63);
        const EXP_MASK: u64 = 0x7FF0_0000_0000_0000;
        let max_bits = data
            .iter()
            .map(|v| v.to_bits() & ABS_MASK)
            .fold(0u64, u64::max);
        if max_bits >= EXP_MASK {
            let (index, &value) = data
                .iter()
                .enumerate()
                .find(|(_, v)| !v.is_finite())
                .expect("non-finite entry exists");
            return Err(TensorError::NonFinite { value, index });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len: usize = shape.iter().product();
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self, TensorError> {
        let len: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; len])
    }

    /// 1-element tensor holding a scalar.
    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Tensor::new(vec![1], vec![value])
    }

    /// 2-D constructor from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, TensorError> {
        let m = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(m * d);
        for r in rows {
            assert_eq!(r.len(), d, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor::new(vec![m, d], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix ([m, d] or [m]).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix {:?}", self.shape);
        self.shape[1]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Entry (i, j) of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// In-place mutation for builders that re-validate afterwards.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.len(), other.len(), "dot length mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self + scale * other`, shapes must match.
    pub fn add_scaled(&self, other: &Tensor, scale: f64) -> Result<Tensor, TensorError> {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + scale * b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

/// Per-entry relative error with a unit floor in the denominator:
/// `|a - b| / max(1, |a|, |b|)`, maximized over entries.
pub fn max_rel_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Scalar relative error with a unit floor: `|a - b| / max(1, |a|, |b|)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { .. }));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { index: 1, .. }));
        let err = Tensor::new(vec![1], vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn new_rejects_zero_extent() {
        assert!(matches!(
            Tensor::new(vec![0, 3], vec![]),
            Err(TensorError::ZeroExtent(_))
        ));
    }

    #[test]
    fn matrix_accessors() {
        let t = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 2);
        assert_eq!(t.at(1, 0), 3.0);
    }

    #[test]
    fn rel_error_floors_denominator() {
        assert_eq!(rel_error(0.0, 1e-9), 1e-9);
        assert!((rel_error(2e6, 1e6) - 0.5).abs() < 1e-15);
    }
}
