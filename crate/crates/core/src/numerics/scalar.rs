use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type of a computation graph: `f32` for training and inference,
/// `f64` for finite-difference gradient checks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Default + Send + Sync + 'static
{
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }

    /// Gauss error function, evaluated in double precision.
    fn erf(self) -> Self {
        Self::from_f64c(libm::erf(self.to_f64c()))
    }
}

impl Real for f32 {}
impl Real for f64 {}
