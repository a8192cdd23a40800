use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the whole crate is generic over.
///
/// `f64` is used by the numerical tests (gradient checks, round-trip
/// tolerances); `f32` is the runtime precision for training and inference
/// and is what checkpoints store.
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + rustfft::FftNum
    + Sum<Self>
    + Default
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Lossless when `Self = f64`; rounds to nearest for `f32`.
    fn from_f64c(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    fn to_f64c(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Scalar converts to f64")
    }

    fn from_usize_c(x: usize) -> Self {
        Self::from_f64c(x as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
