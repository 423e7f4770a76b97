//! Per-modality patch discriminators: a stack of strided 4x4 convolutions
//! producing an unbounded patch score map. No parameters are shared between
//! modalities.

use crate::error::{Error, Result};
use crate::nn::act::{leaky_relu, leaky_relu_backward};
use crate::nn::param::{join, Param, Parameterized};
use crate::nn::{Conv2d, InstanceNorm};
use crate::scalar::Scalar;
use ndarray::{Array4, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Widths of the hidden blocks; all but the last use stride 2. The
    /// 1-channel head follows with stride 1.
    pub widths: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            widths: vec![64, 128, 256, 512],
        }
    }
}

#[derive(Debug)]
struct DiscLayer<F> {
    conv: Conv2d<F>,
    norm: Option<InstanceNorm<F>>,
}

#[derive(Debug)]
pub struct PatchDiscriminator<F> {
    layers: Vec<DiscLayer<F>>,
    head: Conv2d<F>,
}

#[derive(Debug)]
pub struct DiscCache<F> {
    /// Per layer: (input, conv output, pre-activation).
    layers: Vec<(Array4<F>, Array4<F>, Array4<F>)>,
    head_in: Array4<F>,
}

impl<F: Scalar> PatchDiscriminator<F> {
    pub fn new<R: Rng>(rng: &mut R, cfg: &DiscriminatorConfig) -> Self {
        let mut layers = Vec::new();
        let mut c_in = 1;
        let n = cfg.widths.len();
        for (li, &w) in cfg.widths.iter().enumerate() {
            let stride = if li + 1 < n { 2 } else { 1 };
            let conv = Conv2d::new(rng, c_in, w, 4, stride, 1);
            // no normalization on the first block
            let norm = if li == 0 {
                None
            } else {
                Some(InstanceNorm::new(w))
            };
            layers.push(DiscLayer { conv, norm });
            c_in = w;
        }
        let head = Conv2d::new(rng, c_in, 1, 4, 1, 1);
        PatchDiscriminator { layers, head }
    }

    pub fn forward(&self, image: &ArrayView4<F>) -> Result<(Array4<F>, DiscCache<F>)> {
        let mut x = image.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let y_conv = layer.conv.forward(&x.view())?;
            let pre_act = match &layer.norm {
                Some(norm) => norm.forward(&y_conv.view()),
                None => y_conv.clone(),
            };
            let y = leaky_relu(&pre_act.view());
            caches.push((x, y_conv, pre_act));
            x = y;
        }
        let score = self.head.forward(&x.view())?;
        Ok((score, DiscCache {
            layers: caches,
            head_in: x,
        }))
    }

    /// Accumulates parameter gradients, returns the gradient on the input
    /// image (used for the generator's adversarial signal).
    pub fn backward(&mut self, cache: &DiscCache<F>, g_score: &ArrayView4<F>) -> Result<Array4<F>> {
        let mut g = self.head.backward(&cache.head_in.view(), g_score)?;
        for (layer, (x, y_conv, pre_act)) in
            self.layers.iter_mut().zip(cache.layers.iter()).rev()
        {
            let ga = leaky_relu_backward(&pre_act.view(), &g.view());
            let gc = match &mut layer.norm {
                Some(norm) => norm.backward(&y_conv.view(), &ga.view()),
                None => ga,
            };
            g = layer.conv.backward(&x.view(), &gc.view())?;
        }
        Ok(g)
    }
}

impl<F: Scalar> Parameterized<F> for PatchDiscriminator<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (li, layer) in self.layers.iter_mut().enumerate() {
            layer.conv.visit_params(&join(prefix, &format!("layer{li}.conv")), f);
            if let Some(norm) = &mut layer.norm {
                norm.visit_params(&join(prefix, &format!("layer{li}.norm")), f);
            }
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }
}

/// One independent patch discriminator per modality.
#[derive(Debug)]
pub struct Discriminators<F> {
    pub cfg: DiscriminatorConfig,
    pub discs: Vec<PatchDiscriminator<F>>,
}

impl<F: Scalar> Discriminators<F> {
    pub fn new<R: Rng>(rng: &mut R, m: usize, cfg: &DiscriminatorConfig) -> Self {
        let discs = (0..m).map(|_| PatchDiscriminator::new(rng, cfg)).collect();
        Discriminators {
            cfg: cfg.clone(),
            discs,
        }
    }

    pub fn modalities(&self) -> usize {
        self.discs.len()
    }

    /// Patch score map for a single-channel image of the given modality.
    pub fn discriminate(
        &self,
        image: &ArrayView4<F>,
        modality_index: usize,
    ) -> Result<Array4<F>> {
        self.check_index(modality_index)?;
        let (score, _) = self.discs[modality_index].forward(image)?;
        Ok(score)
    }

    pub fn check_index(&self, modality_index: usize) -> Result<()> {
        if modality_index >= self.discs.len() {
            return Err(Error::IndexOutOfRange {
                index: modality_index,
                m: self.discs.len(),
            });
        }
        Ok(())
    }
}

impl<F: Scalar> Parameterized<F> for Discriminators<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (i, d) in self.discs.iter_mut().enumerate() {
            d.visit_params(&join(prefix, &format!("dis{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        use rand::Rng;
        Array4::from_shape_fn(dim, |_| rng.sample::<f64, _>(rand_distr::StandardNormal))
    }

    #[test]
    fn default_topology_maps_64_to_6x6_patches() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let disc = PatchDiscriminator::<f32>::new(&mut r, &DiscriminatorConfig::default());
        let x = Array4::<f32>::zeros((2, 1, 64, 64));
        let (score, _) = disc.forward(&x.view()).unwrap();
        assert_eq!(score.dim(), (2, 1, 6, 6));
    }

    #[test]
    fn scoring_is_deterministic_and_finite() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let cfg = DiscriminatorConfig { widths: vec![4, 8] };
        let discs = Discriminators::<f64>::new(&mut r, 2, &cfg);
        let x = randn(&mut r, (1, 1, 16, 16));
        let a = discs.discriminate(&x.view(), 0).unwrap();
        let b = discs.discriminate(&x.view(), 0).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn out_of_range_modality_errors() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let cfg = DiscriminatorConfig { widths: vec![4, 8] };
        let discs = Discriminators::<f64>::new(&mut r, 4, &cfg);
        let x = Array4::<f64>::zeros((1, 1, 16, 16));
        assert!(matches!(
            discs.discriminate(&x.view(), 4),
            Err(Error::IndexOutOfRange { index: 4, m: 4 })
        ));
    }

    #[test]
    fn discriminators_are_independent() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let cfg = DiscriminatorConfig { widths: vec![4, 8] };
        let mut discs = Discriminators::<f64>::new(&mut r, 2, &cfg);
        let x = randn(&mut r, (1, 1, 16, 16));
        let (score, cache) = discs.discs[0].forward(&x.view()).unwrap();
        let g = Array4::<f64>::ones(score.raw_dim());
        discs.discs[0].backward(&cache, &g.view()).unwrap();
        let mut grads = std::collections::BTreeMap::new();
        discs.visit_params("", &mut |name, p| {
            grads.insert(name, p.grad.iter().any(|&v| v != 0.0));
        });
        assert!(grads.iter().any(|(n, &g)| n.starts_with("dis0.") && g));
        assert!(grads.iter().all(|(n, &g)| !n.starts_with("dis1.") || !g));
    }
}
