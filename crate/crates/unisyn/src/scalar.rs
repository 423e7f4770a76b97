//! Scalar abstraction: the whole model is generic over the element type so
//! that training runs at f32 while gradient checks run at f64.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};

pub trait Scalar:
    Float
    + NumAssign
    + ScalarOperand
    + LinalgScalar
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64c(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("value not representable in scalar type")
    }

    fn to_f64c(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar not convertible to f64")
    }
}

impl<T> Scalar for T where
    T: Float
        + NumAssign
        + ScalarOperand
        + LinalgScalar
        + FromPrimitive
        + ToPrimitive
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}
