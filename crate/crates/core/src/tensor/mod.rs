//! Dense N-dimensional arrays and the reverse-mode differentiation tape.
//!
//! `Field` is a row-major dense array over a [`Real`] scalar. Broadcasting
//! is deliberately minimal — equal shapes or a scalar operand, nothing else —
//! because that is all the denoiser and the solvers need. The differentiation
//! tape lives in [`tape`], convolution kernels in [`conv`], and the
//! power-of-two FFT used by the spectral solver in [`fft`].

mod conv;
mod fft;
mod tape;

pub use conv::{conv2d, conv2d_shape_hint, Padding};
pub use fft::{fft2, freq_index, ifft2, ComplexField};
pub use tape::{Grads, NodeId, Tape};

use crate::error::{CoreError, Result};
use crate::real::Real;

/// Dense row-major array of real values.
///
/// Invariants: `shape.iter().product() == data.len()`, and all values are
/// finite after any public operation (enforced at construction and spot
/// checked under debug assertions by the tape).
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Field<T> {
    /// Builds a field, validating the shape/data agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::Numerical(
                "field construction received non-finite values".into(),
            ));
        }
        Ok(Field { shape, data })
    }

    /// Builds a field without the finiteness scan. Internal fast path for
    /// values that are finite by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Field { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Field {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Field {
            shape,
            data: vec![value; numel],
        }
    }

    /// Builds a field from a function of the flat (row-major) index.
    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Field {
            shape,
            data: (0..numel).map(f).collect(),
        }
    }

    /// A rank-0 field holding one value; the tape's scalar node shape.
    pub fn scalar(value: T) -> Self {
        Field {
            shape: vec![],
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the same data under a new shape of equal element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(CoreError::shape(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Field {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(CoreError::shape(format!(
                "{op}: shapes {:?} and {:?} are not broadcast-compatible \
                 (only equal shapes or a scalar operand are supported)",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a * b)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|v| v + s)
    }

    pub fn mul_scalar(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Elementwise combination of two same-shaped fields.
    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, "zip")?;
        Ok(Field {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += w * other`, shape-checked. The workhorse of gradient
    /// accumulation and ensemble averaging.
    pub fn add_scaled(&mut self, other: &Self, w: T) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += w * *s;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn norm_l2(&self) -> T {
        self.data
            .iter()
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Converts element precision (f32 ↔ f64) keeping the shape.
    pub fn cast<U: Real>(&self) -> Field<U> {
        Field {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.wide())).collect(),
        }
    }
}
