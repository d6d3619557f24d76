//! Scalar abstraction for the numeric kernels: f32 or f64.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type for tensors and the autodiff graph.
///
/// The lab instantiates everything at `f64` (see the crate-root aliases);
/// `f32` is supported for callers that want the smaller footprint.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Error function, needed for the exact GELU.
    fn erf(self) -> Self;

    /// Shorthand for lossy conversion from an `f64` literal.
    fn from_lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

/// Standard normal CDF via the error function.
pub fn normal_cdf<S: Scalar>(x: S) -> S {
    let half = S::from_lit(0.5);
    let inv_sqrt2 = S::from_lit(std::f64::consts::FRAC_1_SQRT_2);
    half * (S::one() + (x * inv_sqrt2).erf())
}

/// Standard normal density.
pub fn normal_pdf<S: Scalar>(x: S) -> S {
    let inv_sqrt_2pi = S::from_lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    inv_sqrt_2pi * (-x * x * S::from_lit(0.5)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_symmetry() {
        assert!((normal_cdf(0.0f64) - 0.5).abs() < 1e-15);
        let x = 0.73f64;
        assert!((normal_cdf(x) + normal_cdf(-x) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cdf_tails() {
        assert!(normal_cdf(10.0f64) > 1.0 - 1e-12);
        assert!(normal_cdf(-10.0f64) < 1e-12);
    }
}
