//! The full generator: encode -> unify (per scale) -> decode.

use crate::conditioning::AvailabilityCondition;
use crate::decoder::{DecodeCache, Decoder, DecoderConfig, GeneratorOutput};
use crate::encoder::{EncodeCache, Encoder, EncoderConfig};
use crate::error::Result;
use crate::fusion::{Fusion, FusionCache, FusionConfig};
use crate::nn::param::{join, Param, Parameterized};
use crate::scalar::Scalar;
use ndarray::{Array4, ArrayView4};
use rand::Rng;

#[derive(Debug)]
pub struct Generator<F> {
    pub encoder: Encoder<F>,
    pub fusion: Fusion<F>,
    pub decoder: Decoder<F>,
}

#[derive(Debug)]
pub struct GeneratorCache<F> {
    pub encode: EncodeCache<F>,
    pub fuse: FusionCache<F>,
    pub decode: DecodeCache<F>,
}

impl<F: Scalar> Generator<F> {
    pub fn new<R: Rng>(
        rng: &mut R,
        m: usize,
        enc_cfg: &EncoderConfig,
        fus_cfg: &FusionConfig,
        dec_cfg: &DecoderConfig,
    ) -> Result<Self> {
        let encoder = Encoder::new(rng, m, enc_cfg)?;
        let fusion = Fusion::new(rng, m, &enc_cfg.widths, fus_cfg);
        let decoder = Decoder::new(rng, m, &enc_cfg.widths, dec_cfg);
        Ok(Generator {
            encoder,
            fusion,
            decoder,
        })
    }

    pub fn modalities(&self) -> usize {
        self.encoder.modalities()
    }

    /// `pixels` must already be zero-imputed consistently with `ac`.
    pub fn forward(
        &self,
        pixels: &ArrayView4<F>,
        ac: &AvailabilityCondition,
    ) -> Result<(GeneratorOutput<F>, GeneratorCache<F>)> {
        ac.check_input()?;
        let (features, encode) = self.encoder.forward(pixels)?;
        let (unified, fuse) = self.fusion.forward(&features, ac)?;
        let (output, decode) = self.decoder.forward(&unified)?;
        Ok((
            output,
            GeneratorCache {
                encode,
                fuse,
                decode,
            },
        ))
    }

    /// Backward from image-space gradients; accumulates all parameter grads.
    pub fn backward(
        &mut self,
        cache: &GeneratorCache<F>,
        g_images: &ArrayView4<F>,
    ) -> Result<Array4<F>> {
        let g_unified = self.decoder.backward(&cache.decode, g_images)?;
        let g_features = self.fusion.backward(&cache.fuse, &g_unified)?;
        self.encoder.backward(&cache.encode, &g_features)
    }
}

impl<F: Scalar> Parameterized<F> for Generator<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.encoder.visit_params(&join(prefix, "enc"), f);
        self.fusion.visit_params(&join(prefix, "fus"), f);
        self.decoder.visit_params(&join(prefix, "dec"), f);
    }
}
