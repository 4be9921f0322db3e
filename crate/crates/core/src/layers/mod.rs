//! Forward and backward passes for the individual network sublayers.
//!
//! Each sublayer is an isolated unit: convolution with a sparse connection
//! table, Tanh/ReLU non-linearities, L2/max pooling, local subtractive
//! normalization, and a fully-connected layer. Every backward pass is
//! verified against central finite differences (see [`crate::gradcheck`]).
//!
//! Spatial tensors are `[maps, height, width]` in row-major order. All
//! convolutions are valid (no padding) and all pooling windows tile the
//! input exactly; anything else is an error, never silent truncation.

mod activation;
mod conv;
mod fc;
mod norm;
mod pool;

pub use activation::{relu_backward, relu_forward, tanh_backward, tanh_forward, Unit};
pub use conv::ConvLayer;
pub use fc::FcLayer;
pub use norm::{subnorm_backward, subnorm_forward, NormSpec};
pub use pool::{pool_backward, pool_forward, PoolMode, PoolSpec};

use crate::tensor::Element;

/// `out[i] += sum_t w[t] * inp[i + t]` for a compile-time tap count.
///
/// Per output element this is a fused multiply-add chain in tap order, which
/// keeps the arithmetic identical to a naive per-cell loop while letting the
/// compiler vectorize across `i`.
#[inline(always)]
fn corr_row_fixed<E: Element, const K: usize>(out: &mut [E], inp: &[E], w: &[E]) {
    let w: &[E] = &w[..K];
    for (o, win) in out.iter_mut().zip(inp.windows(K)) {
        let mut acc = *o;
        for t in 0..K {
            acc = w[t].mul_add(win[t], acc);
        }
        *o = acc;
    }
}

/// Runtime-tap version of [`corr_row_fixed`], dispatching to unrolled
/// kernels for the filter widths the registry architectures use.
#[inline]
pub(crate) fn corr_row<E: Element>(out: &mut [E], inp: &[E], w: &[E]) {
    match w.len() {
        1 => corr_row_fixed::<E, 1>(out, inp, w),
        2 => corr_row_fixed::<E, 2>(out, inp, w),
        3 => corr_row_fixed::<E, 3>(out, inp, w),
        4 => corr_row_fixed::<E, 4>(out, inp, w),
        5 => corr_row_fixed::<E, 5>(out, inp, w),
        6 => corr_row_fixed::<E, 6>(out, inp, w),
        7 => corr_row_fixed::<E, 7>(out, inp, w),
        8 => corr_row_fixed::<E, 8>(out, inp, w),
        9 => corr_row_fixed::<E, 9>(out, inp, w),
        k => {
            for (o, win) in out.iter_mut().zip(inp.windows(k)) {
                let mut acc = *o;
                for t in 0..k {
                    acc = w[t].mul_add(win[t], acc);
                }
                *o = acc;
            }
        }
    }
}

/// `out[i] += a * x[i]`.
#[inline]
pub(crate) fn axpy<E: Element>(out: &mut [E], a: E, x: &[E]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = a.mul_add(v, *o);
    }
}

/// Dot product with eight independent accumulators.
///
/// The partial sums are combined in a fixed order, so results are
/// deterministic; the lane split exists only to expose instruction-level
/// parallelism.
#[inline]
pub(crate) fn dot_wide<E: Element>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [E::ZERO; LANES];
    let mut chunks_a = a.chunks_exact(LANES);
    let mut chunks_b = b.chunks_exact(LANES);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        for l in 0..LANES {
            acc[l] = ca[l].mul_add(cb[l], acc[l]);
        }
    }
    for (l, (&x, &y)) in chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .enumerate()
    {
        acc[l] = x.mul_add(y, acc[l]);
    }
    let mut total = E::ZERO;
    for v in acc {
        total += v;
    }
    total
}
