use crate::scalar::Scalar;
use ndarray::{Array4, ArrayView4};

/// Nearest-neighbor x2 upsampling.
pub fn upsample_nearest2<F: Scalar>(x: &ArrayView4<F>) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<F>::zeros((b, c, h * 2, w * 2));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[bi, ci, i, j]];
                    y[[bi, ci, 2 * i, 2 * j]] = v;
                    y[[bi, ci, 2 * i, 2 * j + 1]] = v;
                    y[[bi, ci, 2 * i + 1, 2 * j]] = v;
                    y[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample_nearest2_backward<F: Scalar>(gy: &ArrayView4<F>) -> Array4<F> {
    let (b, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    gx[[bi, ci, i, j]] = gy[[bi, ci, 2 * i, 2 * j]]
                        + gy[[bi, ci, 2 * i, 2 * j + 1]]
                        + gy[[bi, ci, 2 * i + 1, 2 * j]]
                        + gy[[bi, ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    gx
}
