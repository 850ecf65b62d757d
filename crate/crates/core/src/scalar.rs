//! Scalar abstraction for the numeric kernels.
//!
//! Attention, objectives, sampling, and the autodiff core are generic over
//! [`Real`] so the same code runs in f64 (reference/tests) and f32
//! (benchmark mode). Concrete aliases live at the crate root.

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by every numeric kernel in this crate.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + std::iter::Sum + std::fmt::Debug + Send + Sync + 'static
{
    /// Convert from f64, panicking only for values unrepresentable in `Self`
    /// (never the case for f32/f64).
    fn from_f64_c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant not representable in scalar type")
    }

    /// Lossy widening to f64 for reporting.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl<T> Real for T where
    T: Float + FromPrimitive + ToPrimitive + std::iter::Sum + std::fmt::Debug + Send + Sync + 'static
{
}
