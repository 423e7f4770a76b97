//! Dynamic feature unification: combines per-modality feature maps at each
//! scale into one map, excluding missing modalities. Hard integration is a
//! masked element-wise max; soft integration is a sigmoid-gated sum driven by
//! multi-kernel spatial attention. Max and HeMIS (per-pixel mean/variance)
//! are baseline strategies.

use crate::conditioning::AvailabilityCondition;
use crate::error::{Error, Result};
use crate::nn::act::{leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward};
use crate::nn::param::{join, Param, Parameterized};
use crate::nn::{concat_channels, split_channels, Conv2d};
use crate::scalar::Scalar;
use ndarray::{Array4, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    #[default]
    Dfum,
    Max,
    Hemis,
}

/// How DFUM combines the hard and soft branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CombineOp {
    /// Element-wise mean of the two branches.
    #[default]
    Mean,
    /// Channel concat followed by a learned 1x1 mixing layer.
    Mix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    pub combine: CombineOp,
    /// Normalize soft gates across available modalities.
    pub normalize_soft: bool,
    /// Attention branch width = max(scale width / this, 1).
    pub branch_width_div: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            strategy: FusionStrategy::Dfum,
            combine: CombineOp::Mean,
            normalize_soft: false,
            branch_width_div: 4,
        }
    }
}

/// Fused per-scale maps; shapes match the per-modality pyramids.
#[derive(Debug)]
pub struct UnifiedFeatureSet<F> {
    pub maps: Vec<Array4<F>>,
}

/// Multi-receptive-field spatial attention for one modality at one scale:
/// 3x3 / 5x5 / 7x7 branches, concat, 1x1 reduction to a single logit map.
#[derive(Debug)]
pub struct AttentionBlock<F> {
    pub conv3: Conv2d<F>,
    pub conv5: Conv2d<F>,
    pub conv7: Conv2d<F>,
    pub reduce: Conv2d<F>,
}

#[derive(Debug)]
pub struct AttnCache<F> {
    x: Array4<F>,
    y3: Array4<F>,
    y5: Array4<F>,
    y7: Array4<F>,
    a_cat: Array4<F>,
    pub gate: Array4<F>,
}

impl<F: Scalar> AttentionBlock<F> {
    pub fn new<R: Rng>(rng: &mut R, channels: usize, branch: usize) -> Self {
        AttentionBlock {
            conv3: Conv2d::new(rng, channels, branch, 3, 1, 1),
            conv5: Conv2d::new(rng, channels, branch, 5, 1, 2),
            conv7: Conv2d::new(rng, channels, branch, 7, 1, 3),
            reduce: Conv2d::new(rng, 3 * branch, 1, 1, 1, 0),
        }
    }

    fn forward(&self, x: &ArrayView4<F>) -> Result<AttnCache<F>> {
        let y3 = self.conv3.forward(x)?;
        let y5 = self.conv5.forward(x)?;
        let y7 = self.conv7.forward(x)?;
        let a_cat = concat_channels(&[
            leaky_relu(&y3.view()).view(),
            leaky_relu(&y5.view()).view(),
            leaky_relu(&y7.view()).view(),
        ]);
        let logit = self.reduce.forward(&a_cat.view())?;
        let gate = sigmoid(&logit.view());
        Ok(AttnCache {
            x: x.to_owned(),
            y3,
            y5,
            y7,
            a_cat,
            gate,
        })
    }

    /// `g_gate` is the gradient on the gate map; returns grad on the input.
    fn backward(&mut self, cache: &AttnCache<F>, g_gate: &ArrayView4<F>) -> Result<Array4<F>> {
        let g_logit = sigmoid_backward(&cache.gate.view(), g_gate);
        let g_cat = self.reduce.backward(&cache.a_cat.view(), &g_logit.view())?;
        let b = self.conv3.c_out();
        let parts = split_channels(&g_cat.view(), &[b, b, b]);
        let g3 = leaky_relu_backward(&cache.y3.view(), &parts[0].view());
        let g5 = leaky_relu_backward(&cache.y5.view(), &parts[1].view());
        let g7 = leaky_relu_backward(&cache.y7.view(), &parts[2].view());
        let mut gx = self.conv3.backward(&cache.x.view(), &g3.view())?;
        gx += &self.conv5.backward(&cache.x.view(), &g5.view())?;
        gx += &self.conv7.backward(&cache.x.view(), &g7.view())?;
        Ok(gx)
    }
}

impl<F: Scalar> Parameterized<F> for AttentionBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.conv3.visit_params(&join(prefix, "conv3"), f);
        self.conv5.visit_params(&join(prefix, "conv5"), f);
        self.conv7.visit_params(&join(prefix, "conv7"), f);
        self.reduce.visit_params(&join(prefix, "reduce"), f);
    }
}

/// Element-wise maximum over available modalities. With one available
/// modality this is the identity on that modality's features.
pub fn hard_integrate<F: Scalar>(
    features: &[ArrayView4<F>],
    ac: &AvailabilityCondition,
) -> Result<Array4<F>> {
    Ok(hard_integrate_cached(features, ac)?.0)
}

fn hard_integrate_cached<F: Scalar>(
    features: &[ArrayView4<F>],
    ac: &AvailabilityCondition,
) -> Result<(Array4<F>, Array4<u8>)> {
    check_features(features, ac)?;
    let avail = ac.available_indices();
    let first = avail[0];
    let mut out = features[first].to_owned();
    let mut argmax = Array4::<u8>::from_elem(out.raw_dim(), first as u8);
    for &i in &avail[1..] {
        ndarray::Zip::from(&mut out)
            .and(&mut argmax)
            .and(&features[i])
            .for_each(|o, a, &v| {
                if v > *o {
                    *o = v;
                    *a = i as u8;
                }
            });
    }
    Ok((out, argmax))
}

/// Gated sum over available modalities; gates broadcast over channels.
pub fn soft_integrate<F: Scalar>(
    features: &[ArrayView4<F>],
    gates: &[Array4<F>],
    ac: &AvailabilityCondition,
) -> Result<Array4<F>> {
    check_features(features, ac)?;
    let dim = features[ac.available_indices()[0]].dim();
    let mut out = Array4::<F>::zeros(dim);
    for i in ac.available_indices() {
        if gates[i].dim() != (dim.0, 1, dim.2, dim.3) {
            return Err(Error::Dimension(format!(
                "gate {i} shape {:?} does not match features {:?}",
                gates[i].dim(),
                dim
            )));
        }
        accumulate_gated(&mut out, &features[i], &gates[i]);
    }
    Ok(out)
}

fn accumulate_gated<F: Scalar>(out: &mut Array4<F>, f: &ArrayView4<F>, gate: &Array4<F>) {
    let (_, c, _, _) = out.dim();
    for ci in 0..c {
        let mut o = out.slice_mut(ndarray::s![.., ci, .., ..]);
        let fv = f.slice(ndarray::s![.., ci, .., ..]);
        let gv = gate.slice(ndarray::s![.., 0, .., ..]);
        ndarray::Zip::from(&mut o).and(&fv).and(&gv).for_each(|o, &fv, &gv| {
            *o += fv * gv;
        });
    }
}

/// Channel-summed product, as a [B,1,H,W] map.
fn channel_reduce<F: Scalar>(a: &ArrayView4<F>, b: &ArrayView4<F>) -> Array4<F> {
    (a.to_owned() * b).sum_axis(Axis(1)).insert_axis(Axis(1))
}

fn check_features<F: Scalar>(
    features: &[ArrayView4<F>],
    ac: &AvailabilityCondition,
) -> Result<()> {
    if features.len() != ac.len() {
        return Err(Error::Dimension(format!(
            "{} feature maps vs condition of length {}",
            features.len(),
            ac.len()
        )));
    }
    ac.check_input()?;
    let dim = features[ac.available_indices()[0]].dim();
    for i in ac.available_indices() {
        if features[i].dim() != dim {
            return Err(Error::Dimension(
                "available modality feature shapes differ".to_string(),
            ));
        }
    }
    Ok(())
}

/// Fusion parameters at one scale.
#[derive(Debug)]
pub struct ScaleFusion<F> {
    strategy: FusionStrategy,
    combine: CombineOp,
    normalize_soft: bool,
    /// Per-modality attention blocks (DFUM only).
    attention: Vec<AttentionBlock<F>>,
    /// 1x1 mixing of concat(mean, var) back to the feature width (HeMIS only).
    hemis_mix: Option<Conv2d<F>>,
    /// 1x1 mixing of concat(hard, soft) (DFUM with CombineOp::Mix only).
    combine_mix: Option<Conv2d<F>>,
}

#[derive(Debug)]
pub struct ScaleFusionCache<F> {
    features: Vec<Array4<F>>,
    ac: AvailabilityCondition,
    pub attn: Vec<Option<AttnCache<F>>>,
    argmax: Option<Array4<u8>>,
    hard: Option<Array4<F>>,
    soft: Option<Array4<F>>,
    gate_sum: Option<Array4<F>>,
    hemis_in: Option<Array4<F>>,
    combine_in: Option<Array4<F>>,
}

impl<F: Scalar> ScaleFusion<F> {
    pub fn new<R: Rng>(rng: &mut R, m: usize, channels: usize, cfg: &FusionConfig) -> Self {
        let branch = (channels / cfg.branch_width_div).max(1);
        let attention = match cfg.strategy {
            FusionStrategy::Dfum => (0..m)
                .map(|_| AttentionBlock::new(rng, channels, branch))
                .collect(),
            _ => Vec::new(),
        };
        let hemis_mix = match cfg.strategy {
            FusionStrategy::Hemis => Some(Conv2d::new(rng, 2 * channels, channels, 1, 1, 0)),
            _ => None,
        };
        let combine_mix = match (cfg.strategy, cfg.combine) {
            (FusionStrategy::Dfum, CombineOp::Mix) => {
                Some(Conv2d::new(rng, 2 * channels, channels, 1, 1, 0))
            }
            _ => None,
        };
        ScaleFusion {
            strategy: cfg.strategy,
            combine: cfg.combine,
            normalize_soft: cfg.normalize_soft,
            attention,
            hemis_mix,
            combine_mix,
        }
    }

    /// Spatial gates for every modality; masked modalities get an all-zero
    /// gate and contribute no gradient.
    pub fn compute_attention(
        &self,
        features: &[ArrayView4<F>],
        ac: &AvailabilityCondition,
    ) -> Result<Vec<Array4<F>>> {
        if self.strategy != FusionStrategy::Dfum {
            return Err(Error::Misuse(
                "compute_attention requires the DFUM strategy".to_string(),
            ));
        }
        let caches = self.attention_caches(features, ac)?;
        let dim = features[ac.available_indices()[0]].dim();
        Ok(caches
            .into_iter()
            .map(|c| match c {
                Some(c) => c.gate,
                None => Array4::zeros((dim.0, 1, dim.2, dim.3)),
            })
            .collect())
    }

    fn attention_caches(
        &self,
        features: &[ArrayView4<F>],
        ac: &AvailabilityCondition,
    ) -> Result<Vec<Option<AttnCache<F>>>> {
        check_features(features, ac)?;
        let mut out = Vec::with_capacity(features.len());
        for i in 0..features.len() {
            if ac.is_available(i) {
                out.push(Some(self.attention[i].forward(&features[i])?));
            } else {
                out.push(None);
            }
        }
        Ok(out)
    }

    pub fn forward(
        &self,
        features: &[ArrayView4<F>],
        ac: &AvailabilityCondition,
    ) -> Result<(Array4<F>, ScaleFusionCache<F>)> {
        check_features(features, ac)?;
        let dim = features[ac.available_indices()[0]].dim();
        let mut cache = ScaleFusionCache {
            features: features.iter().map(|f| f.to_owned()).collect(),
            ac: ac.clone(),
            attn: Vec::new(),
            argmax: None,
            hard: None,
            soft: None,
            gate_sum: None,
            hemis_in: None,
            combine_in: None,
        };
        let out = match self.strategy {
            FusionStrategy::Max => {
                let (hard, argmax) = hard_integrate_cached(features, ac)?;
                cache.argmax = Some(argmax);
                hard
            }
            FusionStrategy::Dfum => {
                let (hard, argmax) = hard_integrate_cached(features, ac)?;
                let attn = self.attention_caches(features, ac)?;
                let mut gates: Vec<Array4<F>> = attn
                    .iter()
                    .map(|c| match c {
                        Some(c) => c.gate.clone(),
                        None => Array4::zeros((dim.0, 1, dim.2, dim.3)),
                    })
                    .collect();
                if self.normalize_soft {
                    let mut gsum = Array4::<F>::zeros((dim.0, 1, dim.2, dim.3));
                    for i in ac.available_indices() {
                        gsum += &gates[i];
                    }
                    gsum.mapv_inplace(|v| v + F::from_f64c(NORM_EPS));
                    for i in ac.available_indices() {
                        gates[i] = &gates[i] / &gsum;
                    }
                    cache.gate_sum = Some(gsum);
                }
                let soft = soft_integrate(features, &gates, ac)?;
                let combined = match self.combine {
                    CombineOp::Mean => {
                        let half = F::from_f64c(0.5);
                        (&hard + &soft).mapv(|v| v * half)
                    }
                    CombineOp::Mix => {
                        let cat = concat_channels(&[hard.view(), soft.view()]);
                        let y = self.combine_mix.as_ref().unwrap().forward(&cat.view())?;
                        cache.combine_in = Some(cat);
                        y
                    }
                };
                cache.argmax = Some(argmax);
                cache.hard = Some(hard);
                cache.soft = Some(soft);
                cache.attn = attn;
                combined
            }
            FusionStrategy::Hemis => {
                let avail = ac.available_indices();
                let n = F::from_f64c(avail.len() as f64);
                let mut mean = Array4::<F>::zeros(dim);
                for &i in &avail {
                    mean += &features[i];
                }
                mean.mapv_inplace(|v| v / n);
                let mut var = Array4::<F>::zeros(dim);
                for &i in &avail {
                    let d = features[i].to_owned() - &mean;
                    var += &(&d * &d);
                }
                var.mapv_inplace(|v| v / n);
                let cat = concat_channels(&[mean.view(), var.view()]);
                let y = self.hemis_mix.as_ref().unwrap().forward(&cat.view())?;
                cache.hemis_in = Some(cat);
                y
            }
        };
        Ok((out, cache))
    }

    /// Backward pass; returns per-modality feature gradients (zeros for
    /// masked modalities).
    pub fn backward(
        &mut self,
        cache: &ScaleFusionCache<F>,
        gy: &ArrayView4<F>,
    ) -> Result<Vec<Array4<F>>> {
        let m = cache.features.len();
        let ac = &cache.ac;
        let dim = cache.features[ac.available_indices()[0]].dim();
        let channels = dim.1;
        let mut grads: Vec<Array4<F>> = cache
            .features
            .iter()
            .map(|f| Array4::zeros(f.raw_dim()))
            .collect();
        match self.strategy {
            FusionStrategy::Max => {
                route_hard(&mut grads, cache.argmax.as_ref().unwrap(), gy);
            }
            FusionStrategy::Hemis => {
                let cat = cache.hemis_in.as_ref().unwrap();
                let gcat = self.hemis_mix.as_mut().unwrap().backward(&cat.view(), gy)?;
                let parts = split_channels(&gcat.view(), &[channels, channels]);
                let (g_mean, g_var) = (&parts[0], &parts[1]);
                let avail = ac.available_indices();
                let n = F::from_f64c(avail.len() as f64);
                let mean = cat.slice(ndarray::s![.., 0..channels, .., ..]);
                let two = F::from_f64c(2.0);
                for &i in &avail {
                    // d mean / d F_i = 1/n ; d var / d F_i = 2 (F_i - mean) / n
                    let d = cache.features[i].to_owned() - &mean;
                    grads[i] = g_mean.mapv(|v| v / n) + &(d * g_var).mapv(|v| two * v / n);
                }
            }
            FusionStrategy::Dfum => {
                let (g_hard, g_soft) = match self.combine {
                    CombineOp::Mean => {
                        let half = F::from_f64c(0.5);
                        let g = gy.mapv(|v| v * half);
                        (g.clone(), g)
                    }
                    CombineOp::Mix => {
                        let cat = cache.combine_in.as_ref().unwrap();
                        let gcat = self
                            .combine_mix
                            .as_mut()
                            .unwrap()
                            .backward(&cat.view(), gy)?;
                        let mut parts = split_channels(&gcat.view(), &[channels, channels]);
                        let g_soft = parts.pop().unwrap();
                        let g_hard = parts.pop().unwrap();
                        (g_hard, g_soft)
                    }
                };
                route_hard(&mut grads, cache.argmax.as_ref().unwrap(), &g_hard.view());
                // Soft branch: out = sum_i gate_i (*) F_i, gates possibly
                // normalized by their sum.
                let avail = ac.available_indices();
                let gates: Vec<Array4<F>> = (0..m)
                    .map(|i| match &cache.attn[i] {
                        Some(c) => {
                            if let Some(gsum) = &cache.gate_sum {
                                &c.gate / gsum
                            } else {
                                c.gate.clone()
                            }
                        }
                        None => Array4::zeros((dim.0, 1, dim.2, dim.3)),
                    })
                    .collect();
                for &i in &avail {
                    accumulate_gated(&mut grads[i], &g_soft.view(), &gates[i]);
                }
                // Gate gradients.
                if let Some(gsum) = &cache.gate_sum {
                    // normalized: d soft / d gate_k = (F_k - soft) / S
                    let soft = cache.soft.as_ref().unwrap();
                    for &i in &avail {
                        let diff = &cache.features[i] - soft;
                        let mut g_gate = channel_reduce(&diff.view(), &g_soft.view());
                        g_gate.zip_mut_with(gsum, |g, &s| *g /= s);
                        let g_in = self.attention[i]
                            .backward(cache.attn[i].as_ref().unwrap(), &g_gate.view())?;
                        grads[i] += &g_in;
                    }
                } else {
                    for &i in &avail {
                        let g_gate =
                            channel_reduce(&cache.features[i].view(), &g_soft.view());
                        let g_in = self.attention[i]
                            .backward(cache.attn[i].as_ref().unwrap(), &g_gate.view())?;
                        grads[i] += &g_in;
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn route_hard<F: Scalar>(grads: &mut [Array4<F>], argmax: &Array4<u8>, gy: &ArrayView4<F>) {
    let (b, c, h, w) = gy.dim();
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let src = argmax[[bi, ci, i, j]] as usize;
                    grads[src][[bi, ci, i, j]] += gy[[bi, ci, i, j]];
                }
            }
        }
    }
}

impl<F: Scalar> Parameterized<F> for ScaleFusion<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (i, a) in self.attention.iter_mut().enumerate() {
            a.visit_params(&join(prefix, &format!("attn{i}")), f);
        }
        if let Some(c) = &mut self.hemis_mix {
            c.visit_params(&join(prefix, "hemis_mix"), f);
        }
        if let Some(c) = &mut self.combine_mix {
            c.visit_params(&join(prefix, "combine_mix"), f);
        }
    }
}

/// All five scales of fusion parameters.
#[derive(Debug)]
pub struct Fusion<F> {
    pub cfg: FusionConfig,
    pub scales: Vec<ScaleFusion<F>>,
}

#[derive(Debug)]
pub struct FusionCache<F> {
    pub scales: Vec<ScaleFusionCache<F>>,
}

impl<F: Scalar> Fusion<F> {
    pub fn new<R: Rng>(rng: &mut R, m: usize, widths: &[usize], cfg: &FusionConfig) -> Self {
        let scales = widths
            .iter()
            .map(|&c| ScaleFusion::new(rng, m, c, cfg))
            .collect();
        Fusion {
            cfg: cfg.clone(),
            scales,
        }
    }

    pub fn forward(
        &self,
        features: &crate::encoder::ModalityFeatureSet<F>,
        ac: &AvailabilityCondition,
    ) -> Result<(UnifiedFeatureSet<F>, FusionCache<F>)> {
        let n_scales = self.scales.len();
        let mut maps = Vec::with_capacity(n_scales);
        let mut caches = Vec::with_capacity(n_scales);
        for s in 0..n_scales {
            let views: Vec<ArrayView4<F>> = features
                .features
                .iter()
                .map(|per_mod| per_mod[s].view())
                .collect();
            let (y, c) = self.scales[s].forward(&views, ac)?;
            maps.push(y);
            caches.push(c);
        }
        Ok((UnifiedFeatureSet { maps }, FusionCache { scales: caches }))
    }

    /// `grads[s]` is the gradient on the scale-s unified map; returns
    /// per-modality per-scale gradients.
    pub fn backward(
        &mut self,
        cache: &FusionCache<F>,
        grads: &[Array4<F>],
    ) -> Result<Vec<Vec<Array4<F>>>> {
        let m = cache.scales[0].features.len();
        let mut out: Vec<Vec<Array4<F>>> = (0..m).map(|_| Vec::new()).collect();
        for (s, sc) in cache.scales.iter().enumerate() {
            let per_mod = self.scales[s].backward(sc, &grads[s].view())?;
            for (i, g) in per_mod.into_iter().enumerate() {
                out[i].push(g);
            }
        }
        Ok(out)
    }
}

impl<F: Scalar> Parameterized<F> for Fusion<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (s, sc) in self.scales.iter_mut().enumerate() {
            sc.visit_params(&join(prefix, &format!("scale{s}")), f);
        }
    }
}
