//! Row-major dense tensors generic over the scalar type.

use std::fmt;
use std::sync::Arc;

use super::{NumResult, NumericsError};

/// Floating-point scalar usable by the graph. Implemented for `f32` and
/// `f64`; the model is generic so the same forward code can be gradient
/// checked in double precision.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. Data is shared on clone; all operations produce
/// fresh buffers, so shared data is never mutated in place.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor from a shape and a flat row-major buffer.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> NumResult<Self> {
        let volume: usize = shape.iter().product();
        if data.len() != volume {
            return Err(NumericsError::DataLength {
                expected: volume,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let volume = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![S::zero(); volume]),
        }
    }

    /// Tensor filled with a single value.
    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let volume = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![value; volume]),
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
        }
    }

    /// Rank-1 tensor from a slice.
    pub fn vector(values: &[S]) -> Self {
        Self {
            shape: vec![values.len()],
            data: Arc::new(values.to_vec()),
        }
    }

    /// Rank-2 tensor from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> NumResult<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> NumResult<S> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(NumericsError::InvalidShape {
                op: "item",
                shape: self.shape.clone(),
                detail: "expected exactly one element".into(),
            })
        }
    }

    /// Returns a copy of the data with one element replaced; used by finite
    /// differencing to perturb a single coordinate.
    pub fn with_value_at(&self, index: usize, value: S) -> Self {
        let mut data = self.data.as_ref().clone();
        data[index] = value;
        Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    /// Same data viewed under a new shape of equal volume.
    pub fn reshape(&self, shape: Vec<usize>) -> NumResult<Self> {
        let volume: usize = shape.iter().product();
        if volume != self.data.len() {
            return Err(NumericsError::DataLength {
                expected: volume,
                got: self.data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Element-wise cast between scalar types (f32 <-> f64).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| T::from_f64(v.into_f64())).collect()),
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element difference against another tensor of the
    /// same shape.
    pub fn max_abs_diff(&self, other: &Self) -> NumResult<f64> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.into_f64() - b.into_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Exact bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.into_f64().to_bits() == b.into_f64().to_bits())
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{:?}, ... {} elements]", &self.data[..8], self.data.len())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(err, NumericsError::DataLength { expected: 6, got: 5 });
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f64>::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let r = t.reshape(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(vec![4, 2]).is_err());
    }

    #[test]
    fn cast_round_trips_exact_small_values() {
        let t = Tensor::<f32>::vector(&[1.5, -2.25, 0.0]);
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert!(t.bit_eq(&back));
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(4.0f64).item().unwrap(), 4.0);
        assert!(Tensor::<f64>::vector(&[1.0, 2.0]).item().is_err());
    }

    #[test]
    fn finite_detection() {
        assert!(Tensor::<f32>::vector(&[1.0, -2.0]).all_finite());
        assert!(!Tensor::<f32>::vector(&[1.0, f32::NAN]).all_finite());
        assert!(!Tensor::<f32>::vector(&[f32::INFINITY]).all_finite());
    }
}
