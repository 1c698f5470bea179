use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Element type for tensors: an IEEE float with the conversions and
/// constants the ops need.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Conversion from `f64` for literals and RNG draws (rounds for `f32`).
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to any float scalar")
    }

    /// Conversion from `usize` for size-derived factors.
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize converts to any float scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
