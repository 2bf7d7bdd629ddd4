//! Scalar abstraction shared by every numerical routine in the crate.
//!
//! All estimation code is written against [`Scalar`] so the same routines run
//! in `f64` (the default, used by the CLI and reports) or `f32`.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

/// floating point: f32 or f64
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Logistic function, evaluated without overflow for large |x|.
#[inline]
pub fn expit<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn logit<T: Scalar>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

/// log(1 + e^x)
#[inline]
pub fn log1pexp<T: Scalar>(x: T) -> T {
    if x > T::c(30.0) {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Sum in a fixed left-to-right order.
#[inline]
pub fn ordered_sum<T: Scalar>(xs: impl IntoIterator<Item = T>) -> T {
    xs.into_iter().fold(T::zero(), |a, b| a + b)
}

pub fn l2_norm<T: Scalar>(xs: &[T]) -> T {
    ordered_sum(xs.iter().map(|&x| x * x)).sqrt()
}

/// Two-sided Wald p-value for `estimate / se`.
pub fn wald_p_value(estimate: f64, se: f64) -> f64 {
    if !(se > 0.0) || !se.is_finite() {
        return f64::NAN;
    }
    let z = (estimate / se).abs();
    2.0 * normal_sf(z)
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)
}

pub const Z_975: f64 = 1.959_963_984_540_054;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expit_symmetry_and_tails() {
        assert_eq!(expit(0.0_f64), 0.5);
        assert!((expit(2.0_f64) + expit(-2.0) - 1.0).abs() < 1e-15);
        assert_eq!(expit(-800.0_f64), 0.0);
        assert_eq!(expit(800.0_f64), 1.0);
        assert!((expit(0.3_f32) - 0.574_442_5).abs() < 1e-6);
    }

    #[test]
    fn log1pexp_matches_naive_in_range() {
        for &x in &[-20.0, -1.0, 0.0, 3.0, 29.0, 31.0, 50.0] {
            let naive = (1.0_f64 + f64::exp(x)).ln();
            assert!((log1pexp(x) - naive).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn wald_p_matches_reported_layout() {
        // 1.093 / 0.489 -> p ~ 0.025
        let p = wald_p_value(1.093, 0.489);
        assert!((p - 0.0254).abs() < 5e-4, "p={p}");
        assert!(wald_p_value(1.0, 0.0).is_nan());
    }
}
