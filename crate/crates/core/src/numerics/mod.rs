//! Dense tensors and a reverse-mode gradient tape.
//!
//! [`Tensor`] is a plain row-major array. Differentiable computation goes
//! through a [`Tape`]: every operation appends a node holding its value and
//! the identities of its inputs, so nodes are stored in topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! The engine is generic over [`Real`] so the model trains in `f32` while
//! gradient checks run in `f64`.

mod kernels;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Floating point element type of a tensor.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    /// Converts from `f64`, rounding to the nearest representable value.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Real")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
