//! Minimal neural-network primitives with hand-written backward passes.

pub mod act;
pub mod block;
pub mod conv;
pub mod init;
pub mod norm;
pub mod param;
pub mod resample;

pub use conv::Conv2d;
pub use norm::InstanceNorm;
pub use param::{Param, Parameterized};

use crate::scalar::Scalar;
use ndarray::{Array4, ArrayView4, Axis};

/// Concatenate along the channel axis.
pub fn concat_channels<F: Scalar>(parts: &[ArrayView4<F>]) -> Array4<F> {
    ndarray::concatenate(Axis(1), parts).expect("channel concat shape mismatch")
}

/// Split a channel-concat gradient back into per-part gradients.
pub fn split_channels<F: Scalar>(g: &ArrayView4<F>, widths: &[usize]) -> Vec<Array4<F>> {
    let mut out = Vec::with_capacity(widths.len());
    let mut start = 0;
    for &w in widths {
        out.push(
            g.slice(ndarray::s![.., start..start + w, .., ..])
                .to_owned(),
        );
        start += w;
    }
    out
}
