//! Commonality- and discrepancy-sensitive encoder: M modality-specific
//! streams plus one common stream, fused per scale with 1x1 mixing layers.
//! The deepest specific-stream scales live in one shared storage used by all
//! modalities. MMS (specific streams only) and C (common stream only) are
//! ablation variants.

use crate::error::{Error, Result};
use crate::nn::block::{EncBlock, EncBlockCache};
use crate::nn::param::{join, Param, Parameterized};
use crate::nn::{concat_channels, split_channels, Conv2d};
use crate::scalar::Scalar;
use ndarray::{Array4, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    #[default]
    Cds,
    Mms,
    C,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// Channel width at each scale; the number of scales is `widths.len()`.
    pub widths: Vec<usize>,
    /// How many of the deepest specific-stream scales share one storage.
    pub shared_scales: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            variant: EncoderVariant::Cds,
            widths: vec![32, 64, 128, 256, 512],
            shared_scales: 2,
        }
    }
}

impl EncoderConfig {
    pub fn n_scales(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("encoder widths must be nonzero".into()));
        }
        if self.shared_scales > self.widths.len() {
            return Err(Error::Config(
                "shared_scales exceeds the number of scales".into(),
            ));
        }
        Ok(())
    }
}

/// Five-scale feature pyramid per modality: `features[i][s]` has shape
/// [B, widths[s], H/2^s, W/2^s].
#[derive(Debug)]
pub struct ModalityFeatureSet<F> {
    pub features: Vec<Vec<Array4<F>>>,
}

#[derive(Debug)]
struct ModalityCache<F> {
    spec: Vec<EncBlockCache<F>>,
    common: Vec<EncBlockCache<F>>,
    /// Concat of (specific, common) outputs fed to each fusion conv.
    fuse_in: Vec<Array4<F>>,
}

#[derive(Debug)]
pub struct EncodeCache<F> {
    per_modality: Vec<ModalityCache<F>>,
}

#[derive(Debug)]
pub struct Encoder<F> {
    pub cfg: EncoderConfig,
    m: usize,
    /// Per modality, the non-shared specific scales.
    specific_own: Vec<Vec<EncBlock<F>>>,
    /// The shared deepest specific scales (one storage for all modalities).
    specific_shared: Vec<EncBlock<F>>,
    /// Common stream, one block per scale.
    common: Vec<EncBlock<F>>,
    /// Per-scale 1x1 mixing of (specific, common) -> width.
    fusion: Vec<Conv2d<F>>,
}

impl<F: Scalar> Encoder<F> {
    pub fn new<R: Rng>(rng: &mut R, m: usize, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.n_scales();
        let own = s - cfg.shared_scales;
        let cin = |sc: usize| if sc == 0 { 1 } else { cfg.widths[sc - 1] };
        let has_specific = cfg.variant != EncoderVariant::C;
        let has_common = cfg.variant != EncoderVariant::Mms;

        let mut specific_own = Vec::new();
        let mut specific_shared = Vec::new();
        if has_specific {
            for _ in 0..m {
                specific_own.push(
                    (0..own)
                        .map(|sc| EncBlock::new(rng, cin(sc), cfg.widths[sc], sc > 0))
                        .collect(),
                );
            }
            specific_shared = (own..s)
                .map(|sc| EncBlock::new(rng, cin(sc), cfg.widths[sc], sc > 0))
                .collect();
        }
        let common = if has_common {
            (0..s)
                .map(|sc| EncBlock::new(rng, cin(sc), cfg.widths[sc], sc > 0))
                .collect()
        } else {
            Vec::new()
        };
        let fusion = if cfg.variant == EncoderVariant::Cds {
            (0..s)
                .map(|sc| Conv2d::new(rng, 2 * cfg.widths[sc], cfg.widths[sc], 1, 1, 0))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Encoder {
            cfg: cfg.clone(),
            m,
            specific_own,
            specific_shared,
            common,
            fusion,
        })
    }

    pub fn modalities(&self) -> usize {
        self.m
    }

    fn spec_block(&self, modality: usize, scale: usize) -> &EncBlock<F> {
        let own = self.cfg.n_scales() - self.cfg.shared_scales;
        if scale < own {
            &self.specific_own[modality][scale]
        } else {
            &self.specific_shared[scale - own]
        }
    }

    pub fn forward(
        &self,
        pixels: &ArrayView4<F>,
    ) -> Result<(ModalityFeatureSet<F>, EncodeCache<F>)> {
        let (_, m, _, _) = pixels.dim();
        if m != self.m {
            return Err(Error::Dimension(format!(
                "encoder built for {} modalities, batch has {m}",
                self.m
            )));
        }
        let s = self.cfg.n_scales();
        let mut features = Vec::with_capacity(m);
        let mut caches = Vec::with_capacity(m);
        for i in 0..m {
            let x = pixels
                .slice(ndarray::s![.., i..i + 1, .., ..])
                .to_owned();
            let mut mod_feats = Vec::with_capacity(s);
            let mut cache = ModalityCache {
                spec: Vec::new(),
                common: Vec::new(),
                fuse_in: Vec::new(),
            };
            match self.cfg.variant {
                EncoderVariant::Cds => {
                    let mut spec_in = x.clone();
                    let mut common_in = x;
                    for sc in 0..s {
                        let (sp, spc) = self.spec_block(i, sc).forward(&spec_in.view())?;
                        let (co, coc) = self.common[sc].forward(&common_in.view())?;
                        let cat = concat_channels(&[sp.view(), co.view()]);
                        let fused = self.fusion[sc].forward(&cat.view())?;
                        cache.spec.push(spc);
                        cache.common.push(coc);
                        cache.fuse_in.push(cat);
                        spec_in = fused.clone();
                        common_in = co;
                        mod_feats.push(fused);
                    }
                }
                EncoderVariant::Mms => {
                    let mut spec_in = x;
                    for sc in 0..s {
                        let (sp, spc) = self.spec_block(i, sc).forward(&spec_in.view())?;
                        cache.spec.push(spc);
                        spec_in = sp.clone();
                        mod_feats.push(sp);
                    }
                }
                EncoderVariant::C => {
                    let mut common_in = x;
                    for sc in 0..s {
                        let (co, coc) = self.common[sc].forward(&common_in.view())?;
                        cache.common.push(coc);
                        common_in = co.clone();
                        mod_feats.push(co);
                    }
                }
            }
            features.push(mod_feats);
            caches.push(cache);
        }
        Ok((
            ModalityFeatureSet { features },
            EncodeCache {
                per_modality: caches,
            },
        ))
    }

    /// Common-stream output (pre-fusion) for one modality and scale, from the
    /// forward cache. CDS variant only.
    pub fn common_prefusion<'a>(
        &self,
        cache: &'a EncodeCache<F>,
        modality: usize,
        scale: usize,
    ) -> ArrayView4<'a, F> {
        let w = self.cfg.widths[scale];
        cache.per_modality[modality].fuse_in[scale].slice(ndarray::s![.., w..2 * w, .., ..])
    }

    /// Backward pass: `grads[i][s]` is the gradient on modality i's scale-s
    /// output. Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &mut self,
        cache: &EncodeCache<F>,
        grads: &[Vec<Array4<F>>],
    ) -> Result<Array4<F>> {
        let s = self.cfg.n_scales();
        let own = s - self.cfg.shared_scales;
        let m = self.m;
        let (b, _, h, w) = cache.per_modality[0]
            .spec
            .first()
            .map(|c| c.c1.x.dim())
            .or_else(|| cache.per_modality[0].common.first().map(|c| c.c1.x.dim()))
            .expect("non-empty cache");
        let mut gx = Array4::<F>::zeros((b, m, h, w));
        for i in 0..m {
            let mc = &cache.per_modality[i];
            match self.cfg.variant {
                EncoderVariant::Cds => {
                    let mut spec_carry: Option<Array4<F>> = None;
                    let mut common_carry: Option<Array4<F>> = None;
                    for sc in (0..s).rev() {
                        let mut g_f = grads[i][sc].clone();
                        if let Some(c) = spec_carry.take() {
                            g_f += &c;
                        }
                        let gcat = self.fusion[sc].backward(&mc.fuse_in[sc].view(), &g_f.view())?;
                        let width = self.cfg.widths[sc];
                        let mut parts = split_channels(&gcat.view(), &[width, width]);
                        let g_cdir = parts.pop().unwrap();
                        let g_sp = parts.pop().unwrap();
                        let mut g_c = g_cdir;
                        if let Some(c) = common_carry.take() {
                            g_c += &c;
                        }
                        let g_spec_in = if sc < own {
                            self.specific_own[i][sc].backward(&mc.spec[sc], &g_sp.view())?
                        } else {
                            self.specific_shared[sc - own].backward(&mc.spec[sc], &g_sp.view())?
                        };
                        let g_common_in = self.common[sc].backward(&mc.common[sc], &g_c.view())?;
                        if sc > 0 {
                            spec_carry = Some(g_spec_in);
                            common_carry = Some(g_common_in);
                        } else {
                            let mut slot = gx.slice_mut(ndarray::s![.., i..i + 1, .., ..]);
                            slot += &g_spec_in;
                            slot += &g_common_in;
                        }
                    }
                }
                EncoderVariant::Mms => {
                    let mut carry: Option<Array4<F>> = None;
                    for sc in (0..s).rev() {
                        let mut g = grads[i][sc].clone();
                        if let Some(c) = carry.take() {
                            g += &c;
                        }
                        let g_in = if sc < own {
                            self.specific_own[i][sc].backward(&mc.spec[sc], &g.view())?
                        } else {
                            self.specific_shared[sc - own].backward(&mc.spec[sc], &g.view())?
                        };
                        if sc > 0 {
                            carry = Some(g_in);
                        } else {
                            let mut slot = gx.slice_mut(ndarray::s![.., i..i + 1, .., ..]);
                            slot += &g_in;
                        }
                    }
                }
                EncoderVariant::C => {
                    let mut carry: Option<Array4<F>> = None;
                    for sc in (0..s).rev() {
                        let mut g = grads[i][sc].clone();
                        if let Some(c) = carry.take() {
                            g += &c;
                        }
                        let g_in = self.common[sc].backward(&mc.common[sc], &g.view())?;
                        if sc > 0 {
                            carry = Some(g_in);
                        } else {
                            let mut slot = gx.slice_mut(ndarray::s![.., i..i + 1, .., ..]);
                            slot += &g_in;
                        }
                    }
                }
            }
        }
        Ok(gx)
    }
}

impl<F: Scalar> Parameterized<F> for Encoder<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (i, stream) in self.specific_own.iter_mut().enumerate() {
            for (sc, b) in stream.iter_mut().enumerate() {
                b.visit_params(&join(prefix, &format!("spec{i}.scale{sc}")), f);
            }
        }
        for (sc, b) in self.specific_shared.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("spec_shared.scale{sc}")), f);
        }
        for (sc, b) in self.common.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("common.scale{sc}")), f);
        }
        for (sc, c) in self.fusion.iter_mut().enumerate() {
            c.visit_params(&join(prefix, &format!("fuse.scale{sc}")), f);
        }
    }
}
