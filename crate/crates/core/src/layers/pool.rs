//! Non-overlapping spatial pooling.
//!
//! The stride always equals the window size, so the input spatial extent
//! must divide exactly; anything else is an error. L2 pooling takes the
//! square root of the sum of squares over each window, max pooling routes
//! the value (and the gradient) through the window maximum with ties broken
//! toward the first element in row-major order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    L2,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub size: usize,
    pub mode: PoolMode,
}

fn check_divisible(spec: &PoolSpec, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::shape(format!("pool expects [maps, h, w], got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if spec.size == 0 || h % spec.size != 0 || w % spec.size != 0 {
        return Err(Error::shape(format!(
            "pool window {0}x{0} does not tile input {h}x{w}",
            spec.size
        )));
    }
    Ok((c, h, w))
}

/// Pools each map; for max pooling also returns the flat input index of
/// each window's argmax (needed by the backward pass).
pub fn pool_forward<E: Element>(
    spec: &PoolSpec,
    input: &Tensor<E>,
) -> Result<(Tensor<E>, Option<Vec<u32>>)> {
    let (c, h, w) = check_divisible(spec, input.shape())?;
    let p = spec.size;
    let (oh, ow) = (h / p, w / p);
    let mut out = Tensor::zeros(&[c, oh, ow])?;
    let in_data = input.data();
    let out_data = out.data_mut();

    match spec.mode {
        PoolMode::L2 => {
            for m in 0..c {
                let plane = &in_data[m * h * w..(m + 1) * h * w];
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = E::ZERO;
                        for wy in 0..p {
                            let row = &plane[(y * p + wy) * w + x * p..][..p];
                            for &v in row {
                                acc = v.mul_add(v, acc);
                            }
                        }
                        out_data[(m * oh + y) * ow + x] = acc.sqrt();
                    }
                }
            }
            Ok((out, None))
        }
        PoolMode::Max => {
            let mut argmax = vec![0u32; c * oh * ow];
            for m in 0..c {
                let plane = &in_data[m * h * w..(m + 1) * h * w];
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best = plane[(y * p) * w + x * p];
                        let mut best_idx = (y * p) * w + x * p;
                        for wy in 0..p {
                            for wx in 0..p {
                                let idx = (y * p + wy) * w + x * p + wx;
                                if plane[idx] > best {
                                    best = plane[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out_data[(m * oh + y) * ow + x] = best;
                        argmax[(m * oh + y) * ow + x] = (m * h * w + best_idx) as u32;
                    }
                }
            }
            Ok((out, Some(argmax)))
        }
    }
}

/// Gradient of [`pool_forward`].
///
/// For L2 pooling each window element receives `grad * x_i / out` (zero for
/// an all-zero window). For max pooling the gradient is routed to the
/// argmax recorded during the forward pass.
pub fn pool_backward<E: Element>(
    spec: &PoolSpec,
    input: &Tensor<E>,
    output: &Tensor<E>,
    argmax: Option<&[u32]>,
    grad_out: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (c, h, w) = check_divisible(spec, input.shape())?;
    let p = spec.size;
    let (oh, ow) = (h / p, w / p);
    if grad_out.shape() != [c, oh, ow] {
        return Err(Error::shape(format!(
            "pool grad_out shape {:?} expected [{c}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let mut grad_in = Tensor::zeros(input.shape())?;

    match spec.mode {
        PoolMode::L2 => {
            let in_data = input.data();
            let out_data = output.data();
            let g_data = grad_out.data();
            let gi = grad_in.data_mut();
            for m in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let o = out_data[(m * oh + y) * ow + x];
                        if o == E::ZERO {
                            continue;
                        }
                        let scale = g_data[(m * oh + y) * ow + x] / o;
                        for wy in 0..p {
                            let base = m * h * w + (y * p + wy) * w + x * p;
                            for wx in 0..p {
                                gi[base + wx] = scale.mul_add(in_data[base + wx], gi[base + wx]);
                            }
                        }
                    }
                }
            }
        }
        PoolMode::Max => {
            let argmax = argmax.ok_or_else(|| {
                Error::invalid("max pool backward requires the argmax from the forward pass")
            })?;
            let g_data = grad_out.data();
            let gi = grad_in.data_mut();
            for (&idx, &g) in argmax.iter().zip(g_data) {
                gi[idx as usize] += g;
            }
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(size: usize, mode: PoolMode) -> PoolSpec {
        PoolSpec { size, mode }
    }

    #[test]
    fn l2_three_four_window() {
        let input: Tensor = Tensor::from_vec(&[1, 2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let (out, _) = pool_forward(&spec(2, PoolMode::L2), &input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data()[0], 5.0);
    }

    #[test]
    fn max_picks_largest() {
        let input: Tensor = Tensor::from_vec(&[1, 2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let (out, argmax) = pool_forward(&spec(2, PoolMode::Max), &input).unwrap();
        assert_eq!(out.data()[0], 4.0);
        assert_eq!(argmax.unwrap()[0], 1);
    }

    #[test]
    fn max_tie_breaks_to_first_row_major() {
        let input: Tensor = Tensor::from_vec(&[1, 2, 2], vec![4.0, 4.0, 4.0, 4.0]).unwrap();
        let (_, argmax) = pool_forward(&spec(2, PoolMode::Max), &input).unwrap();
        assert_eq!(argmax.unwrap()[0], 0);
    }

    #[test]
    fn zero_window_l2_backward_is_zero() {
        let input: Tensor = Tensor::zeros(&[1, 2, 2]).unwrap();
        let s = spec(2, PoolMode::L2);
        let (out, _) = pool_forward(&s, &input).unwrap();
        assert_eq!(out.data()[0], 0.0);
        let grad_out = Tensor::filled(&[1, 1, 1], 1.0).unwrap();
        let grad_in = pool_backward(&s, &input, &out, None, &grad_out).unwrap();
        assert!(grad_in.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_divisible_extent_is_an_error() {
        let input: Tensor = Tensor::zeros(&[1, 5, 4]).unwrap();
        assert!(pool_forward(&spec(2, PoolMode::L2), &input).is_err());
    }

    #[test]
    fn l2_single_nonzero_per_window_is_abs() {
        let input: Tensor =
            Tensor::from_vec(&[1, 2, 4], vec![0.0, -2.5, 0.0, 0.0, 0.0, 0.0, 1.5, 0.0]).unwrap();
        let (out, _) = pool_forward(&spec(2, PoolMode::L2), &input).unwrap();
        assert_eq!(out.data(), &[2.5, 1.5]);
    }

    #[test]
    fn max_backward_routes_to_argmax() {
        let input: Tensor =
            Tensor::from_vec(&[1, 2, 2], vec![1.0, 7.0, 3.0, 2.0]).unwrap();
        let s = spec(2, PoolMode::Max);
        let (out, argmax) = pool_forward(&s, &input).unwrap();
        let grad_out = Tensor::filled(&[1, 1, 1], 0.5).unwrap();
        let grad_in =
            pool_backward(&s, &input, &out, argmax.as_deref(), &grad_out).unwrap();
        assert_eq!(grad_in.data(), &[0.0, 0.5, 0.0, 0.0]);
    }
}
