use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

/// Gaussian init with the given standard deviation. Draws are made in f64 so
/// that f32 and f64 models built from the same seed share the same values.
pub fn normal<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            F::from_f64c(z * std)
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product mismatch")
}

/// He-style std for convolution weights.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}
