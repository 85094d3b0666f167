use std::fmt;

use super::NumericError;

/// Highest rank a [`Tensor`] may carry.
pub const MAX_RANK: usize = 4;

/// Dense row-major tensor of `f64` values.
///
/// Three-axis data is laid out as (channels, height, width).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, NumericError> {
        if shape.len() > MAX_RANK {
            return Err(NumericError::RankTooHigh(shape.len()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank {} exceeds {MAX_RANK}", shape.len());
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same data viewed under a new shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self, NumericError> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute element-wise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64, NumericError> {
        self.expect_shape("max_abs_diff", other.shape())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), NumericError> {
        self.expect_shape("add_assign", other.shape())?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub(crate) fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<(), NumericError> {
        if self.shape == shape {
            Ok(())
        } else {
            Err(NumericError::ShapeMismatch {
                op,
                expected: shape.to_vec(),
                found: self.shape.clone(),
            })
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        let head: Vec<_> = self.data.iter().take(PREVIEW).collect();
        if self.data.len() > PREVIEW {
            write!(f, " {head:?}…")
        } else {
            write!(f, " {head:?}")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_data_length() {
        let err = Tensor::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, NumericError::DataLength { .. }));
    }

    #[test]
    fn rejects_rank_five() {
        assert!(matches!(
            Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]),
            Err(NumericError::RankTooHigh(5))
        ));
    }

    #[test]
    fn scalar_has_one_element() {
        let t = Tensor::new(&[], vec![3.0]).unwrap();
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn max_abs_diff_requires_equal_shapes() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[4]);
        assert!(a.max_abs_diff(&b).is_err());
        assert_eq!(a.max_abs_diff(&Tensor::full(&[2, 2], -0.5)).unwrap(), 0.5);
    }
}
