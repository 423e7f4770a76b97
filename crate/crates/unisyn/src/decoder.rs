//! M modality-specific decoding streams: the unified pyramid is decoded
//! deepest-first, each shallower unified map merged skip-wise after a
//! nearest-neighbor x2 upsample. The deepest decoding block is one shared
//! storage across all streams.

use crate::error::{Error, Result};
use crate::fusion::UnifiedFeatureSet;
use crate::nn::act::{clamp, clamp_backward};
use crate::nn::block::{ConvNormRelu, ConvNormReluCache};
use crate::nn::param::{join, Param, Parameterized};
use crate::nn::resample::{upsample_nearest2, upsample_nearest2_backward};
use crate::nn::{concat_channels, split_channels, Conv2d};
use crate::scalar::Scalar;
use ndarray::{Array4, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Intensity ceiling for the bounded output clamp; `None` = unbounded.
    pub out_clamp: Option<f64>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            out_clamp: Some(4.0),
        }
    }
}

/// Synthesized/reconstructed images, shape [B, M, H, W].
#[derive(Debug)]
pub struct GeneratorOutput<F> {
    pub images: Array4<F>,
}

#[derive(Debug)]
struct StreamTail<F> {
    /// Merge blocks for scales S-2 .. 0, deepest first.
    merges: Vec<ConvNormRelu<F>>,
    head: Conv2d<F>,
}

#[derive(Debug)]
pub struct Decoder<F> {
    pub cfg: DecoderConfig,
    widths: Vec<usize>,
    /// Deepest decoding block, one storage shared by every stream.
    shared_deep: ConvNormRelu<F>,
    streams: Vec<StreamTail<F>>,
}

#[derive(Debug)]
struct StreamCache<F> {
    deep: ConvNormReluCache<F>,
    /// Per merge step: (input to the merge conv = concat(upsampled, skip),
    /// pre-upsample state).
    merges: Vec<(ConvNormReluCache<F>, Array4<F>)>,
    head_in: Array4<F>,
    head_out: Array4<F>,
}

#[derive(Debug)]
pub struct DecodeCache<F> {
    streams: Vec<StreamCache<F>>,
}

impl<F: Scalar> Decoder<F> {
    pub fn new<R: Rng>(rng: &mut R, m: usize, widths: &[usize], cfg: &DecoderConfig) -> Self {
        let s = widths.len();
        let deep_w = widths[s - 1];
        let shared_deep = ConvNormRelu::new(rng, deep_w, deep_w, 3, 1);
        let streams = (0..m)
            .map(|_| {
                let merges = (0..s - 1)
                    .rev()
                    .map(|sc| {
                        // input: upsampled state (widths[sc+1]) ++ skip (widths[sc])
                        ConvNormRelu::new(rng, widths[sc + 1] + widths[sc], widths[sc], 3, 1)
                    })
                    .collect();
                let head = Conv2d::new(rng, widths[0], 1, 3, 1, 1);
                StreamTail { merges, head }
            })
            .collect();
        Decoder {
            cfg: cfg.clone(),
            widths: widths.to_vec(),
            shared_deep,
            streams,
        }
    }

    pub fn modalities(&self) -> usize {
        self.streams.len()
    }

    pub fn forward(
        &self,
        unified: &UnifiedFeatureSet<F>,
    ) -> Result<(GeneratorOutput<F>, DecodeCache<F>)> {
        let s = self.widths.len();
        if unified.maps.len() != s {
            return Err(Error::Dimension(format!(
                "decoder expects {s} scales, got {}",
                unified.maps.len()
            )));
        }
        let (b, _, h0, w0) = unified.maps[0].dim();
        let m = self.streams.len();
        let mut images = Array4::<F>::zeros((b, m, h0, w0));
        let mut caches = Vec::with_capacity(m);
        for (i, stream) in self.streams.iter().enumerate() {
            let (mut state, deep_cache) =
                self.shared_deep.forward(&unified.maps[s - 1].view())?;
            let mut merge_caches = Vec::with_capacity(s - 1);
            for (step, sc) in (0..s - 1).rev().enumerate() {
                let pre_up = state;
                let up = upsample_nearest2(&pre_up.view());
                let cat = concat_channels(&[up.view(), unified.maps[sc].view()]);
                let (next, mc) = stream.merges[step].forward(&cat.view())?;
                merge_caches.push((mc, pre_up));
                state = next;
            }
            let head_out = stream.head.forward(&state.view())?;
            let out = match self.cfg.out_clamp {
                Some(hi) => clamp(&head_out.view(), F::from_f64c(hi)),
                None => head_out.clone(),
            };
            images
                .slice_mut(ndarray::s![.., i..i + 1, .., ..])
                .assign(&out);
            caches.push(StreamCache {
                deep: deep_cache,
                merges: merge_caches,
                head_in: state,
                head_out,
            });
        }
        Ok((GeneratorOutput { images }, DecodeCache { streams: caches }))
    }

    /// Backward from image-space gradients [B, M, H, W]; returns gradients on
    /// the unified maps.
    pub fn backward(
        &mut self,
        cache: &DecodeCache<F>,
        g_images: &ArrayView4<F>,
    ) -> Result<Vec<Array4<F>>> {
        let s = self.widths.len();
        let mut g_unified: Vec<Option<Array4<F>>> = vec![None; s];
        for (i, stream) in self.streams.iter_mut().enumerate() {
            let sc_cache = &cache.streams[i];
            let g_out = g_images
                .slice(ndarray::s![.., i..i + 1, .., ..])
                .to_owned();
            let g_head_out = match self.cfg.out_clamp {
                Some(hi) => clamp_backward(
                    &sc_cache.head_out.view(),
                    F::from_f64c(hi),
                    &g_out.view(),
                ),
                None => g_out,
            };
            let mut g_state = stream
                .head
                .backward(&sc_cache.head_in.view(), &g_head_out.view())?;
            for (step, sc) in (0..s - 1).rev().enumerate().rev() {
                let (mc, _pre_up) = &sc_cache.merges[step];
                let g_cat = stream.merges[step].backward(mc, &g_state.view())?;
                let up_w = self.widths[sc + 1];
                let mut parts = split_channels(&g_cat.view(), &[up_w, self.widths[sc]]);
                let g_skip = parts.pop().unwrap();
                let g_up = parts.pop().unwrap();
                add_into(&mut g_unified[sc], g_skip);
                g_state = upsample_nearest2_backward(&g_up.view());
            }
            let g_deep_in = self.shared_deep.backward(&sc_cache.deep, &g_state.view())?;
            add_into(&mut g_unified[s - 1], g_deep_in);
        }
        Ok(g_unified.into_iter().map(|g| g.unwrap()).collect())
    }
}

fn add_into<F: Scalar>(slot: &mut Option<Array4<F>>, g: Array4<F>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<F: Scalar> Parameterized<F> for Decoder<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.shared_deep.visit_params(&join(prefix, "shared_deep"), f);
        for (i, st) in self.streams.iter_mut().enumerate() {
            for (step, mb) in st.merges.iter_mut().enumerate() {
                mb.visit_params(&join(prefix, &format!("stream{i}.merge{step}")), f);
            }
            st.head.visit_params(&join(prefix, &format!("stream{i}.head")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pyramid(rng: &mut ChaCha8Rng, widths: &[usize], h0: usize) -> UnifiedFeatureSet<f64> {
        use rand::Rng;
        let maps = widths
            .iter()
            .enumerate()
            .map(|(s, &c)| {
                let hw = h0 >> s;
                Array4::from_shape_fn((1, c, hw, hw), |_| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                })
            })
            .collect();
        UnifiedFeatureSet { maps }
    }

    #[test]
    fn decodes_to_input_resolution_per_modality() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let widths = [3, 4, 5];
        let dec = Decoder::<f64>::new(&mut r, 3, &widths, &DecoderConfig::default());
        let unified = pyramid(&mut r, &widths, 16);
        let (out, _) = dec.forward(&unified).unwrap();
        assert_eq!(out.images.dim(), (1, 3, 16, 16));
    }

    #[test]
    fn decode_is_deterministic() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let widths = [2, 3];
        let dec = Decoder::<f64>::new(&mut r, 2, &widths, &DecoderConfig::default());
        let unified = pyramid(&mut r, &widths, 8);
        let (a, _) = dec.forward(&unified).unwrap();
        let (b, _) = dec.forward(&unified).unwrap();
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn clamped_output_stays_in_range() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let widths = [2, 3];
        let dec = Decoder::<f64>::new(
            &mut r,
            2,
            &widths,
            &DecoderConfig {
                out_clamp: Some(4.0),
            },
        );
        // large-magnitude features exercise both clamp edges
        let mut unified = pyramid(&mut r, &widths, 8);
        for m in &mut unified.maps {
            m.mapv_inplace(|v| v * 50.0);
        }
        let (out, _) = dec.forward(&unified).unwrap();
        assert!(out.images.iter().all(|&v| (0.0..=4.0).contains(&v)));
    }

    #[test]
    fn output_is_finite() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let widths = [2, 3];
        let dec = Decoder::<f64>::new(&mut r, 2, &widths, &DecoderConfig { out_clamp: None });
        let unified = pyramid(&mut r, &widths, 8);
        let (out, _) = dec.forward(&unified).unwrap();
        assert!(out.images.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn deepest_block_is_one_storage() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut dec = Decoder::<f64>::new(&mut r, 4, &[2, 3], &DecoderConfig::default());
        let mut shared = 0;
        dec.visit_params("", &mut |name, _| {
            if name.starts_with("shared_deep.conv.weight") {
                shared += 1;
            }
        });
        assert_eq!(shared, 1);
    }

    #[test]
    fn scale_count_mismatch_errors() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let dec = Decoder::<f64>::new(&mut r, 2, &[2, 3], &DecoderConfig::default());
        let unified = pyramid(&mut r, &[2, 3, 4], 8);
        assert!(matches!(
            dec.forward(&unified),
            Err(Error::Dimension(_))
        ));
    }
}
