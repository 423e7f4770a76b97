use crate::scalar::Scalar;
use ndarray::{Array4, ArrayView4};

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu<F: Scalar>(x: &ArrayView4<F>) -> Array4<F> {
    let a = F::from_f64c(LEAKY_SLOPE);
    x.mapv(|v| if v > F::zero() { v } else { a * v })
}

/// `x` is the pre-activation input.
pub fn leaky_relu_backward<F: Scalar>(x: &ArrayView4<F>, gy: &ArrayView4<F>) -> Array4<F> {
    let a = F::from_f64c(LEAKY_SLOPE);
    let mut gx = gy.to_owned();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &v| {
        if v <= F::zero() {
            *g *= a;
        }
    });
    gx
}

pub fn sigmoid<F: Scalar>(x: &ArrayView4<F>) -> Array4<F> {
    x.mapv(|v| F::one() / (F::one() + (-v).exp()))
}

/// `y` is the sigmoid output.
pub fn sigmoid_backward<F: Scalar>(y: &ArrayView4<F>, gy: &ArrayView4<F>) -> Array4<F> {
    let mut gx = gy.to_owned();
    ndarray::Zip::from(&mut gx).and(y).for_each(|g, &s| {
        *g *= s * (F::one() - s);
    });
    gx
}

/// Bounded linear clamp to [0, hi].
pub fn clamp<F: Scalar>(x: &ArrayView4<F>, hi: F) -> Array4<F> {
    x.mapv(|v| {
        if v < F::zero() {
            F::zero()
        } else if v > hi {
            hi
        } else {
            v
        }
    })
}

pub fn clamp_backward<F: Scalar>(x: &ArrayView4<F>, hi: F, gy: &ArrayView4<F>) -> Array4<F> {
    let mut gx = gy.to_owned();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &v| {
        if v < F::zero() || v > hi {
            *g = F::zero();
        }
    });
    gx
}
