//! Scalar abstraction: all tensor math is generic over `f32`/`f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign, NumCast};

/// Floating-point element type for tensors and model parameters.
///
/// Experiments run in `f64` (gradient checks need the precision); `f32`
/// is supported for the math core.
pub trait Scalar:
    Float + NumAssign + Sum + Display + Debug + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self {
        NumCast::from(v).expect("f64 value representable in scalar type")
    }

    fn to_f64(self) -> f64 {
        NumCast::from(self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
