use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::scalar::Scalar;

/// Flat model weights. Every entry is finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Params<T> {
    values: Vec<T>,
}

impl<T: Scalar> Params<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(FedError::invalid("parameter vector must have positive dimension"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FedError::invalid(format!("non-finite parameter at index {i}")));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "parameter vector must have positive dimension");
        Self {
            values: vec![T::zero(); dim],
        }
    }

    /// Wraps values produced by arithmetic on already-finite vectors. Callers
    /// re-check finiteness where overflow is possible.
    pub(crate) fn from_vec_unchecked(values: Vec<T>) -> Self {
        Self { values }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn ensure_same_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(FedError::Shape {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

impl<T> Index<usize> for Params<T> {
    type Output = T;

    fn index(&self, i: usize) -> &T {
        &self.values[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(Params::new(vec![1.0f64, f64::NAN]).is_err());
        assert!(Params::new(vec![f64::INFINITY]).is_err());
        assert!(Params::<f64>::new(vec![]).is_err());
        assert_eq!(Params::new(vec![1.0f32, 2.0]).unwrap().dim(), 2);
    }

    #[test]
    fn dim_mismatch_is_shape_error() {
        let a = Params::<f64>::zeros(3);
        let b = Params::<f64>::zeros(4);
        assert_eq!(
            a.ensure_same_dim(&b),
            Err(FedError::Shape { expected: 3, found: 4 })
        );
    }
}
