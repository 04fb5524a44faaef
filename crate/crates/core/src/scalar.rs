//! Scalar traits the numeric code is written against.
//!
//! [`Ring`] is enough for matrix products, rectifiers, backpropagation and the
//! representation-similarity loss, so those also run over exact rationals.
//! [`Real`] adds the transcendental functions needed by softmax, cross-entropy
//! and SGD.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, Num, NumAssign, ToPrimitive};

/// Commutative ring with an order, closed under the operations used by
/// forward/backward passes.
pub trait Ring:
    Num + NumAssign + Copy + PartialOrd + FromPrimitive + Debug + Send + Sync + 'static
{
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn relu(self) -> Self {
        if self > Self::zero() {
            self
        } else {
            Self::zero()
        }
    }
}

impl<T> Ring for T where
    T: Num + NumAssign + Copy + PartialOrd + FromPrimitive + Debug + Send + Sync + 'static
{
}

/// Floating-point scalar.
pub trait Real: Ring + Float + ToPrimitive + Sum {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }
}

impl<T> Real for T where T: Ring + Float + ToPrimitive + Sum {}

/// Bytes occupied by one scalar in the accounting model.
pub fn scalar_bytes<T>() -> usize {
    std::mem::size_of::<T>()
}
