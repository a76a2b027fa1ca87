use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type for every numeric routine in the crate.
///
/// Implemented for `f32` and `f64`. The training pipeline runs in `f64`; `f32`
/// is supported for the pure numerics (cosine, softmax, decompositions) so
/// embeddings can be handled at their storage precision when that is enough.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` constant into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable in scalar type")
    }

    /// A tolerance of `x`, raised to a small multiple of machine epsilon when
    /// the type cannot resolve `x`.
    #[inline]
    fn tolerance(x: f64) -> Self {
        Self::lit(x).max(Self::epsilon() * Self::lit(8.0))
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
}
