//! Scalar abstractions shared by the numerical modules.
//!
//! Two levels are used. [`Field`] is the minimum needed by the clearing
//! solvers and their brute-force oracles: ordered field arithmetic, which
//! exact rationals satisfy as well as floats. [`Real`] adds everything the
//! differentiable and transcendental code needs (ndarray kernels, `exp`,
//! `ln`, `sqrt`) and is implemented for `f32` and `f64`.

use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, Num, Signed};

/// Ordered field arithmetic with exact comparisons.
pub trait Field: Clone + PartialOrd + Num + Signed + Debug {
    fn from_usize(n: usize) -> Self {
        let mut acc = Self::zero();
        for _ in 0..n {
            acc = acc + Self::one();
        }
        acc
    }
}

impl<T: Clone + PartialOrd + Num + Signed + Debug> Field for T {}

/// Floating point scalar usable on the differentiation tape.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Field
    + Default
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion used for constants written as `f64` literals.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_from_usize_counts() {
        assert_eq!(<f64 as Field>::from_usize(5), 5.0);
        assert_eq!(<i64 as Field>::from_usize(3), 3);
    }

    #[test]
    fn literal_round_trips_in_both_widths() {
        assert_eq!(f64::lit(0.25), 0.25);
        assert_eq!(f32::lit(0.5), 0.5f32);
        assert_eq!(f32::lit(0.5).to_f64_lossy(), 0.5);
    }
}
