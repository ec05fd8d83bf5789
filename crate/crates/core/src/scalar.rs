//! Scalar abstraction over the floating point types the toolkit runs on.
//!
//! All numeric code is generic over [`Scalar`]; training uses `f32`, while
//! gradient checks and the scan-equivalence tests instantiate the same code
//! at `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::NumCast;

/// Floating point scalar: f32 or f64.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::NumAssignOps
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    fn cast<U: NumCast>(v: U) -> Self {
        NumCast::from(v).unwrap()
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }

    fn as_f32(self) -> f32 {
        num_traits::ToPrimitive::to_f32(&self).unwrap()
    }

    fn half() -> Self {
        Self::cast(0.5)
    }

    fn two() -> Self {
        Self::cast(2.0)
    }

    fn pi() -> Self {
        Self::cast(std::f64::consts::PI)
    }

    fn tau() -> Self {
        Self::cast(std::f64::consts::TAU)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable logistic sigmoid.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `x * sigmoid(x)`.
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_matches_naive_on_moderate_inputs() {
        for &x in &[-5.0f64, -1.0, 0.0, 0.3, 2.0, 8.0] {
            let naive = 1.0 / (1.0 + (-x).exp());
            assert!((sigmoid(x) - naive).abs() < 1e-15);
        }
    }

    #[test]
    fn softplus_stable_at_extremes() {
        assert!((softplus(800.0f64) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0f64) >= 0.0);
        assert!(softplus(-800.0f64) < 1e-300);
        assert!((softplus(0.0f64) - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn silu_zero_is_zero() {
        assert_eq!(silu(0.0f64), 0.0);
        assert_eq!(silu(0.0f32), 0.0);
    }

    #[test]
    fn casts_roundtrip() {
        assert_eq!(f32::cast(3usize), 3.0f32);
        assert_eq!(f64::cast(0.25f32), 0.25f64);
        assert_eq!(1.5f32.as_f64(), 1.5f64);
    }
}
