//! 2-D convolution with explicit forward/backward, implemented via im2col and
//! a single GEMM per batch.

use crate::error::{Error, Result};
use crate::nn::init;
use crate::nn::param::{join, Param, Parameterized};
use crate::scalar::Scalar;
use ndarray::{Array2, Array4, ArrayView4, Axis, Ix1};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// Shape [C_out, C_in, k, k].
    pub weight: Param<F>,
    /// Shape [C_out].
    pub bias: Param<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new<R: Rng>(
        rng: &mut R,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = init::he_std(c_in * kernel * kernel);
        let weight = Param::new(init::normal(rng, &[c_out, c_in, kernel, kernel], std));
        let bias = Param::new(ndarray::ArrayD::zeros(ndarray::IxDyn(&[c_out])));
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    /// A 1x1 convolution whose weights copy the first `c_keep` input channels
    /// to the output and zero the rest. Used by tests exercising constructed
    /// mixing weights.
    pub fn identity_select(c_in: usize, c_out: usize, c_keep: usize) -> Self {
        let mut w = ndarray::ArrayD::zeros(ndarray::IxDyn(&[c_out, c_in, 1, 1]));
        for c in 0..c_keep.min(c_out) {
            w[[c, c, 0, 0]] = F::one();
        }
        Conv2d {
            weight: Param::new(w),
            bias: Param::new(ndarray::ArrayD::zeros(ndarray::IxDyn(&[c_out]))),
            stride: 1,
            pad: 0,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn c_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < k || wp < k {
            return Err(Error::Dimension(format!(
                "conv kernel {k} larger than padded input {hp}x{wp}"
            )));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    pub fn forward(&self, x: &ArrayView4<F>) -> Result<Array4<F>> {
        let (b, c_in, h, w) = x.dim();
        if c_in != self.c_in() {
            return Err(Error::Dimension(format!(
                "conv expects {} input channels, got {c_in}",
                self.c_in()
            )));
        }
        let (ho, wo) = self.out_spatial(h, w)?;
        if self.direct_path() {
            return Ok(self.forward_direct(x, ho, wo));
        }
        let cols = im2col(x, self.kernel(), self.stride, self.pad, ho, wo);
        let wmat = self
            .weight
            .value
            .view()
            .into_shape((self.c_out(), self.c_in() * self.kernel() * self.kernel()))
            .expect("weight reshape");
        // [C_out, B*Ho*Wo]
        let mut y2 = wmat.dot(&cols);
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        for (mut row, bv) in y2.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row.mapv_inplace(|v| v + *bv);
        }
        // [C_out, B, Ho, Wo] -> [B, C_out, Ho, Wo]
        let y = y2
            .into_shape((self.c_out(), b, ho, wo))
            .expect("output reshape")
            .permuted_axes([1, 0, 2, 3]);
        Ok(y.as_standard_layout().to_owned())
    }

    /// Backward pass: accumulates weight/bias grads, returns the input grad.
    pub fn backward(&mut self, x: &ArrayView4<F>, gy: &ArrayView4<F>) -> Result<Array4<F>> {
        let (b, _c_in, h, w) = x.dim();
        let (ho, wo) = self.out_spatial(h, w)?;
        let (c_out, c_in, k) = (self.c_out(), self.c_in(), self.kernel());
        debug_assert_eq!(gy.dim(), (b, c_out, ho, wo));
        if self.direct_path() {
            return Ok(self.backward_direct(x, gy, ho, wo));
        }

        // [C_out, B*Ho*Wo]
        let gy2 = gy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned()
            .into_shape((c_out, b * ho * wo))
            .expect("grad reshape");

        let cols = im2col(x, k, self.stride, self.pad, ho, wo);
        let gw = gy2.dot(&cols.t());
        {
            let mut wg = self
                .weight
                .grad
                .view_mut()
                .into_shape((c_out, c_in * k * k))
                .expect("weight grad reshape");
            wg += &gw;
        }
        {
            let mut bg = self
                .bias
                .grad
                .view_mut()
                .into_dimensionality::<Ix1>()
                .unwrap();
            for (bgv, row) in bg.iter_mut().zip(gy2.axis_iter(Axis(0))) {
                *bgv += row.sum();
            }
        }

        let wmat = self
            .weight
            .value
            .view()
            .into_shape((c_out, c_in * k * k))
            .expect("weight reshape");
        let gcols = wmat.t().dot(&gy2);
        Ok(col2im(
            &gcols,
            b,
            c_in,
            h,
            w,
            k,
            self.stride,
            self.pad,
            ho,
            wo,
        ))
    }
}

impl<F: Scalar> Conv2d<F> {
    /// Few output channels can't amortize the im2col buffer; a direct loop
    /// avoids materializing it. Restricted to stride 1, where the inner loops
    /// stay contiguous.
    fn direct_path(&self) -> bool {
        self.stride == 1 && self.c_out() <= 4
    }

    fn forward_direct(&self, x: &ArrayView4<F>, ho: usize, wo: usize) -> Array4<F> {
        let (b, c_in, h, w) = x.dim();
        let (c_out, k, pad) = (self.c_out(), self.kernel(), self.pad);
        let mut y = Array4::<F>::zeros((b, c_out, ho, wo));
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("contiguous input");
        let ys = y.as_slice_mut().expect("contiguous output");
        let wv = self.weight.value.as_slice().expect("contiguous weight");
        let bias = self.bias.value.as_slice().expect("contiguous bias");
        for bi in 0..b {
            for co in 0..c_out {
                let ybase = (bi * c_out + co) * ho * wo;
                ys[ybase..ybase + ho * wo].fill(bias[co]);
                for ci in 0..c_in {
                    let xbase = (bi * c_in + ci) * h * w;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wgt = wv[((co * c_in + ci) * k + ky) * k + kx];
                            let (lo, hi) = ox_range(self.pad, kx, w, wo);
                            for oy in 0..ho {
                                let iy = (oy + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = (xbase + iy as usize * w + kx) as isize - pad as isize;
                                let yrow = ybase + oy * wo;
                                // ix = ox + kx - pad stays in bounds for ox in lo..hi
                                for ox in lo..hi {
                                    ys[yrow + ox] += wgt * xs[(xrow + ox as isize) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn backward_direct(
        &mut self,
        x: &ArrayView4<F>,
        gy: &ArrayView4<F>,
        ho: usize,
        wo: usize,
    ) -> Array4<F> {
        let (b, c_in, h, w) = x.dim();
        let (c_out, k, pad) = (self.c_out(), self.kernel(), self.pad);
        let mut gx = Array4::<F>::zeros((b, c_in, h, w));
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("contiguous input");
        let gy = gy.as_standard_layout();
        let gys = gy.as_slice().expect("contiguous grad");
        let gxs = gx.as_slice_mut().expect("contiguous input grad");
        let weight = &mut self.weight;
        let wv = weight.value.as_slice().expect("contiguous weight");
        let gw = weight.grad.as_slice_mut().expect("contiguous weight grad");
        let gb = self.bias.grad.as_slice_mut().expect("contiguous bias grad");
        for bi in 0..b {
            for co in 0..c_out {
                let ybase = (bi * c_out + co) * ho * wo;
                let mut bsum = F::zero();
                for v in &gys[ybase..ybase + ho * wo] {
                    bsum += *v;
                }
                gb[co] += bsum;
                for ci in 0..c_in {
                    let xbase = (bi * c_in + ci) * h * w;
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((co * c_in + ci) * k + ky) * k + kx;
                            let wgt = wv[widx];
                            let (lo, hi) = ox_range(pad, kx, w, wo);
                            let mut wsum = F::zero();
                            for oy in 0..ho {
                                let iy = (oy + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = (xbase + iy as usize * w + kx) as isize - pad as isize;
                                let yrow = ybase + oy * wo;
                                for ox in lo..hi {
                                    let xi = (xrow + ox as isize) as usize;
                                    let g = gys[yrow + ox];
                                    wsum += g * xs[xi];
                                    gxs[xi] += wgt * g;
                                }
                            }
                            gw[widx] += wsum;
                        }
                    }
                }
            }
        }
        gx
    }
}

impl<F: Scalar> Parameterized<F> for Conv2d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Inclusive-exclusive range of output columns whose input column
/// `ox + kx - pad` lands inside `[0, w)`.
fn ox_range(pad: usize, kx: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(wo);
    (lo.min(hi), hi)
}

/// Layout: rows indexed by (ci, ky, kx), columns by (b, oy, ox).
fn im2col<F: Scalar>(
    x: &ArrayView4<F>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<F> {
    let (b, c_in, h, w) = x.dim();
    let mut cols = Array2::<F>::zeros((c_in * k * k, b * ho * wo));
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("contiguous input");
    let cs = cols.as_slice_mut().expect("contiguous cols");
    let ncol = b * ho * wo;
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let rbase = row * ncol;
                for bi in 0..b {
                    let xbase = (bi * c_in + ci) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let cbase = rbase + (bi * ho + oy) * wo;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[cbase + ox] = xs[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    gcols: &Array2<F>,
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<F> {
    let mut gx = Array4::<F>::zeros((b, c_in, h, w));
    let gcols = gcols.as_standard_layout();
    let gs = gcols.as_slice().expect("contiguous cols");
    let gxs = gx.as_slice_mut().expect("contiguous grad");
    let ncol = b * ho * wo;
    for ci in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let rbase = row * ncol;
                for bi in 0..b {
                    let xbase = (bi * c_in + ci) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let cbase = rbase + (bi * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gxs[xrow + ix as usize] += gs[cbase + ox];
                        }
                    }
                }
            }
        }
    }
    gx
}
