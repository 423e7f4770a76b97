//! Instance normalization: each (sample, channel) plane is normalized over
//! its spatial extent, with a learnable per-channel affine.

use crate::nn::param::{join, Param, Parameterized};
use crate::scalar::Scalar;
use ndarray::{Array4, ArrayView4, Ix1};

const EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct InstanceNorm<F> {
    /// Shape [C].
    pub gamma: Param<F>,
    /// Shape [C].
    pub beta: Param<F>,
}

impl<F: Scalar> InstanceNorm<F> {
    pub fn new(channels: usize) -> Self {
        let gamma = Param::new(ndarray::ArrayD::from_elem(
            ndarray::IxDyn(&[channels]),
            F::one(),
        ));
        let beta = Param::new(ndarray::ArrayD::zeros(ndarray::IxDyn(&[channels])));
        InstanceNorm { gamma, beta }
    }

    fn stats(plane: &[F]) -> (F, F) {
        let n = F::from_f64c(plane.len() as f64);
        let mut mu = F::zero();
        for v in plane {
            mu += *v;
        }
        mu /= n;
        let mut var = F::zero();
        for v in plane {
            let d = *v - mu;
            var += d * d;
        }
        var /= n;
        (mu, var)
    }

    pub fn forward(&self, x: &ArrayView4<F>) -> Array4<F> {
        let (b, c, h, w) = x.dim();
        let eps = F::from_f64c(EPS);
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x.as_standard_layout().to_owned();
        {
            let ys = y.as_slice_mut().unwrap();
            let plane = h * w;
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * plane;
                    let (mu, var) = Self::stats(&ys[off..off + plane]);
                    let inv = (var + eps).sqrt().recip();
                    let (g, be) = (gamma[ci], beta[ci]);
                    for v in &mut ys[off..off + plane] {
                        *v = g * (*v - mu) * inv + be;
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &ArrayView4<F>, gy: &ArrayView4<F>) -> Array4<F> {
        let (b, c, h, w) = x.dim();
        let eps = F::from_f64c(EPS);
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut gx = Array4::<F>::zeros((b, c, h, w));
        let xsl = x.as_standard_layout();
        let xs = xsl.as_slice().unwrap();
        let gysl = gy.as_standard_layout();
        let gys = gysl.as_slice().unwrap();
        let plane = h * w;
        let nf = F::from_f64c(plane as f64);
        let mut dgamma = vec![F::zero(); c];
        let mut dbeta = vec![F::zero(); c];
        {
            let gxs = gx.as_slice_mut().unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * plane;
                    let (mu, var) = Self::stats(&xs[off..off + plane]);
                    let inv = (var + eps).sqrt().recip();
                    let mut mean_gy = F::zero();
                    let mut mean_gy_xhat = F::zero();
                    for i in 0..plane {
                        let xhat = (xs[off + i] - mu) * inv;
                        let g = gys[off + i];
                        mean_gy += g;
                        mean_gy_xhat += g * xhat;
                        dgamma[ci] += g * xhat;
                        dbeta[ci] += g;
                    }
                    mean_gy /= nf;
                    mean_gy_xhat /= nf;
                    let scale = gamma[ci] * inv;
                    for i in 0..plane {
                        let xhat = (xs[off + i] - mu) * inv;
                        gxs[off + i] =
                            scale * (gys[off + i] - mean_gy - xhat * mean_gy_xhat);
                    }
                }
            }
        }
        {
            let mut gg = self
                .gamma
                .grad
                .view_mut()
                .into_dimensionality::<Ix1>()
                .unwrap();
            let mut gb = self
                .beta
                .grad
                .view_mut()
                .into_dimensionality::<Ix1>()
                .unwrap();
            for ci in 0..c {
                gg[ci] += dgamma[ci];
                gb[ci] += dbeta[ci];
            }
        }
        gx
    }
}

impl<F: Scalar> Parameterized<F> for InstanceNorm<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}
