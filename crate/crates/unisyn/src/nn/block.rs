//! Composite layers shared by the encoder and decoder streams.

use crate::error::Result;
use crate::nn::act::{leaky_relu, leaky_relu_backward};
use crate::nn::conv::Conv2d;
use crate::nn::norm::InstanceNorm;
use crate::nn::param::{join, Param, Parameterized};
use crate::scalar::Scalar;
use ndarray::{Array4, ArrayView4};
use rand::Rng;

/// conv -> instance norm -> leaky relu
#[derive(Debug, Clone)]
pub struct ConvNormRelu<F> {
    pub conv: Conv2d<F>,
    pub norm: InstanceNorm<F>,
}

#[derive(Debug)]
pub struct ConvNormReluCache<F> {
    pub x: Array4<F>,
    pub y_conv: Array4<F>,
    pub y_norm: Array4<F>,
}

impl<F: Scalar> ConvNormRelu<F> {
    pub fn new<R: Rng>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let pad = kernel / 2;
        ConvNormRelu {
            conv: Conv2d::new(rng, c_in, c_out, kernel, stride, pad),
            norm: InstanceNorm::new(c_out),
        }
    }

    pub fn forward(&self, x: &ArrayView4<F>) -> Result<(Array4<F>, ConvNormReluCache<F>)> {
        let y_conv = self.conv.forward(x)?;
        let y_norm = self.norm.forward(&y_conv.view());
        let y = leaky_relu(&y_norm.view());
        Ok((
            y,
            ConvNormReluCache {
                x: x.to_owned(),
                y_conv,
                y_norm,
            },
        ))
    }

    pub fn backward(
        &mut self,
        cache: &ConvNormReluCache<F>,
        gy: &ArrayView4<F>,
    ) -> Result<Array4<F>> {
        let g = leaky_relu_backward(&cache.y_norm.view(), gy);
        let g = self.norm.backward(&cache.y_conv.view(), &g.view());
        self.conv.backward(&cache.x.view(), &g.view())
    }
}

impl<F: Scalar> Parameterized<F> for ConvNormRelu<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }
}

/// One encoder scale: two 3x3 conv+norm+relu units, the first of which may
/// downsample with stride 2.
#[derive(Debug, Clone)]
pub struct EncBlock<F> {
    pub unit1: ConvNormRelu<F>,
    pub unit2: ConvNormRelu<F>,
}

#[derive(Debug)]
pub struct EncBlockCache<F> {
    pub c1: ConvNormReluCache<F>,
    pub c2: ConvNormReluCache<F>,
}

impl<F: Scalar> EncBlock<F> {
    pub fn new<R: Rng>(rng: &mut R, c_in: usize, c_out: usize, downsample: bool) -> Self {
        let stride = if downsample { 2 } else { 1 };
        EncBlock {
            unit1: ConvNormRelu::new(rng, c_in, c_out, 3, stride),
            unit2: ConvNormRelu::new(rng, c_out, c_out, 3, 1),
        }
    }

    pub fn forward(&self, x: &ArrayView4<F>) -> Result<(Array4<F>, EncBlockCache<F>)> {
        let (a1, c1) = self.unit1.forward(x)?;
        let (a2, c2) = self.unit2.forward(&a1.view())?;
        Ok((a2, EncBlockCache { c1, c2 }))
    }

    pub fn backward(&mut self, cache: &EncBlockCache<F>, gy: &ArrayView4<F>) -> Result<Array4<F>> {
        let g = self.unit2.backward(&cache.c2, gy)?;
        self.unit1.backward(&cache.c1, &g.view())
    }
}

impl<F: Scalar> Parameterized<F> for EncBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.unit1.visit_params(&join(prefix, "unit1"), f);
        self.unit2.visit_params(&join(prefix, "unit2"), f);
    }
}
