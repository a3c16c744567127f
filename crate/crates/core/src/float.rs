use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Scalar type used throughout the numerical core.
///
/// Implemented for `f32` and `f64`. The solver defaults (tolerances around
/// `1e-5`..`1e-8`) are calibrated for `f64`; `f32` is usable for the
/// operators and proximal maps but needs looser solver tolerances.
pub trait Float: NdFloat + FromPrimitive + Default + Sum + for<'a> Sum<&'a Self> {
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn cst(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    /// Lossy conversion back to `f64` for reporting.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Float for f32 {}
impl Float for f64 {}
