use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar type carried by [`crate::tensor::Field`] data.
///
/// Implemented for `f32` and `f64`. `f64` is the reference precision for
/// oracles and verification; `f32` is permitted for training where speed
/// matters more than the last digits.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, for schedule values and constants.
    fn of(x: f64) -> Self;
    /// Widening conversion to `f64`, for statistics and reports.
    fn wide(self) -> f64;
    /// Dtype code used by the binary field container (0 = f32, 1 = f64).
    const DTYPE_CODE: u8;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn wide(self) -> f64 {
        self as f64
    }
    const DTYPE_CODE: u8 = 0;
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn wide(self) -> f64 {
        self
    }
    const DTYPE_CODE: u8 = 1;
}
