//! Scalar abstraction so the whole simulator runs at either `f32` or `f64`.
//!
//! Configuration values (learning rates, tolerances, probabilities) are plain
//! `f64` everywhere; they cross into the generic computation layer through
//! [`Scalar::of_f64`]. Diagnostics cross back out through [`Scalar::as_f64`].

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, NumAssign, NumCast};

/// Floating-point scalar the simulator is generic over.
///
/// Math (`sqrt`, `exp`, `tanh`, ...) comes from `num_traits::Float`; this
/// trait only adds the conversions and marker bounds the engine needs.
/// `Display`/`FromStr` round-trip bit-exactly for both `f32` and `f64`, which
/// is what the text file formats rely on.
pub trait Scalar:
    Float + NumAssign + Sum + Debug + Display + FromStr + Send + Sync + 'static
{
    /// Convert a configuration-layer `f64` into the working scalar type.
    #[inline]
    fn of_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts to scalar")
    }

    /// Convert back to `f64` for reporting and CSV/JSON output.
    #[inline]
    fn as_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_exactly_for_f64() {
        let x = 0.1f64;
        assert_eq!(<f64 as Scalar>::of_f64(x), x);
        assert_eq!(Scalar::as_f64(x), x);
    }

    #[test]
    fn f32_conversion_narrows() {
        let x = <f32 as Scalar>::of_f64(1.0 / 3.0);
        assert!((Scalar::as_f64(x) - 1.0 / 3.0).abs() < 1e-7);
    }
}
