//! Float bound shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Real scalar usable by the weighting and toy-model code. Implemented for
/// `f32` and `f64`.
pub trait Scalar: Float + Sum + Debug + Display + Send + Sync + 'static {
    fn lit(x: f64) -> Self {
        Self::from(x).expect("literal representable in scalar type")
    }

    fn from_usize(n: usize) -> Self {
        Self::from(n).expect("count representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T: Float + Sum + Debug + Display + Send + Sync + 'static> Scalar for T {}
