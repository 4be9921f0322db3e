//! Local subtractive normalization.
//!
//! Subtracts a Gaussian-weighted local mean from every pixel of every map,
//! independently per map. At the borders the kernel is renormalized over
//! the in-bounds support so the subtracted term stays a weighted mean; a
//! spatially constant input therefore maps to exactly zero everywhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Gaussian-kernel configuration for the normalization sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    /// Window edge (odd).
    pub size: usize,
    pub sigma: f64,
}

impl Default for NormSpec {
    fn default() -> Self {
        NormSpec { size: 5, sigma: 1.0 }
    }
}

impl NormSpec {
    /// Kernel coefficients (row-major `size * size`), normalized to sum to
    /// one over the full window.
    pub fn kernel<E: Element>(&self) -> Result<Vec<E>> {
        if self.size % 2 == 0 || self.size == 0 {
            return Err(Error::invalid(format!(
                "normalization window must be odd, got {}",
                self.size
            )));
        }
        if self.sigma <= 0.0 {
            return Err(Error::invalid("normalization sigma must be positive"));
        }
        let half = (self.size / 2) as isize;
        let mut raw = Vec::with_capacity(self.size * self.size);
        for dy in -half..=half {
            for dx in -half..=half {
                let r2 = (dy * dy + dx * dx) as f64;
                raw.push((-r2 / (2.0 * self.sigma * self.sigma)).exp());
            }
        }
        let total: f64 = raw.iter().sum();
        Ok(raw.into_iter().map(|v| E::from_f64(v / total)).collect())
    }
}

fn check_shape(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "subtractive normalization expects [maps, h, w], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Per-position sum of in-bounds kernel coefficients (shared by all maps).
fn support_sums<E: Element>(kernel: &[E], size: usize, h: usize, w: usize) -> Vec<E> {
    let half = (size / 2) as isize;
    let mut sums = vec![E::ZERO; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = E::ZERO;
            for dy in -half..=half {
                let yy = y + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -half..=half {
                    let xx = x + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    s += kernel[((dy + half) * size as isize + dx + half) as usize];
                }
            }
            sums[(y as usize) * w + x as usize] = s;
        }
    }
    sums
}

/// `out = in - renormalized Gaussian blur of in`, same shape.
pub fn subnorm_forward<E: Element>(spec: &NormSpec, input: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = check_shape(input.shape())?;
    let kernel: Vec<E> = spec.kernel()?;
    let half = (spec.size / 2) as isize;
    let sums = support_sums(&kernel, spec.size, h, w);

    let mut out = Tensor::zeros(input.shape())?;
    let in_data = input.data();
    let out_data = out.data_mut();
    for m in 0..c {
        let plane = &in_data[m * h * w..(m + 1) * h * w];
        let out_plane = &mut out_data[m * h * w..(m + 1) * h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = E::ZERO;
                for dy in (-half).max(-y)..=half.min(h as isize - 1 - y) {
                    for dx in (-half).max(-x)..=half.min(w as isize - 1 - x) {
                        let kv = kernel[((dy + half) * spec.size as isize + dx + half) as usize];
                        acc = kv.mul_add(plane[((y + dy) * w as isize + x + dx) as usize], acc);
                    }
                }
                let pos = (y as usize) * w + x as usize;
                out_plane[pos] = plane[pos] - acc / sums[pos];
            }
        }
    }
    Ok(out)
}

/// Gradient of [`subnorm_forward`]; the map is linear, so no forward cache
/// is needed.
pub fn subnorm_backward<E: Element>(spec: &NormSpec, grad_out: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = check_shape(grad_out.shape())?;
    let kernel: Vec<E> = spec.kernel()?;
    let half = (spec.size / 2) as isize;
    let sums = support_sums(&kernel, spec.size, h, w);

    let mut grad_in = grad_out.clone();
    let g_data = grad_out.data();
    let gi_data = grad_in.data_mut();
    for m in 0..c {
        let g_plane = &g_data[m * h * w..(m + 1) * h * w];
        let gi_plane = &mut gi_data[m * h * w..(m + 1) * h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let pos = (y as usize) * w + x as usize;
                let scale = g_plane[pos] / sums[pos];
                for dy in (-half).max(-y)..=half.min(h as isize - 1 - y) {
                    for dx in (-half).max(-x)..=half.min(w as isize - 1 - x) {
                        let kv = kernel[((dy + half) * spec.size as isize + dx + half) as usize];
                        gi_plane[((y + dy) * w as isize + x + dx) as usize] -= kv * scale;
                    }
                }
            }
        }
    }
    Ok(grad_in)
}
