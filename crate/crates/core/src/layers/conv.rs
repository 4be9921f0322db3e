//! Valid (no-padding) convolution with a per-filter connection table.
//!
//! Filters correlate against a subset of the input maps: except for the
//! first layer of a network, filters are sparsely connected at random with
//! a constant fan-in per output filter. The table lists, for each output
//! filter, the sorted input-map indices it reads.
//!
//! Execution strategies (all deterministic, with fixed accumulation
//! orders):
//!
//! - wide outputs run a register-stationary row kernel: a chunk of output
//!   columns accumulates across all taps in four independent
//!   register chains (reassociated relative to a naive per-cell loop);
//!   filters sharing a connection row (dense layers) are processed four at
//!   a time so input rows are loaded once per four fused multiply-adds;
//! - narrow outputs (fewer than 16 columns) go through an im2col buffer
//!   and accumulate across output cells in exactly the naive per-cell
//!   (connection, row, column) order;
//! - the input gradient is the correlation of the zero-padded output
//!   gradient with the flipped filters, so it reuses the same row kernel
//!   through a reverse connection map.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// Outputs narrower than this use the im2col (cells) strategy.
const ROW_PATH_MIN_OW: usize = 16;

/// Convolution sublayer.
///
/// `weights` is `[n_out, fan_in, k, k]`: slot `j` of filter `f` correlates
/// input map `connections[f * fan_in + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<E: Element = f32> {
    pub n_in: usize,
    pub n_out: usize,
    pub kernel: usize,
    pub fan_in: usize,
    /// Flat `[n_out, fan_in]` table of input-map indices, each row sorted
    /// and duplicate-free.
    pub connections: Vec<u32>,
    pub weights: Tensor<E>,
    pub bias: Tensor<E>,
}

/// Dispatches a call on the runtime kernel width to a const-generic
/// instantiation (0 keeps the width dynamic) so tap loops fully unroll.
macro_rules! dispatch_kernel {
    ($k:expr, $callee:ident ($($arg:expr),* $(,)?)) => {
        match $k {
            2 => $callee::<_, 2>($($arg),*),
            3 => $callee::<_, 3>($($arg),*),
            4 => $callee::<_, 4>($($arg),*),
            5 => $callee::<_, 5>($($arg),*),
            6 => $callee::<_, 6>($($arg),*),
            7 => $callee::<_, 7>($($arg),*),
            8 => $callee::<_, 8>($($arg),*),
            9 => $callee::<_, 9>($($arg),*),
            _ => $callee::<_, 0>($($arg),*),
        }
    };
}

impl<E: Element> ConvLayer<E> {
    /// Builds a layer with zeroed weights and an explicit connection table.
    pub fn with_connections(
        n_in: usize,
        n_out: usize,
        kernel: usize,
        connections: Vec<u32>,
    ) -> Result<Self> {
        if n_out == 0 || kernel == 0 || n_in == 0 {
            return Err(Error::invalid("conv dimensions must be positive"));
        }
        if connections.is_empty() || connections.len() % n_out != 0 {
            return Err(Error::invalid(format!(
                "connection table length {} is not a positive multiple of {n_out} filters",
                connections.len()
            )));
        }
        let fan_in = connections.len() / n_out;
        for f in 0..n_out {
            let row = &connections[f * fan_in..(f + 1) * fan_in];
            for pair in row.windows(2) {
                if pair[0] >= pair[1] {
                    return Err(Error::invalid(format!(
                        "connection row {f} must be sorted without duplicates: {row:?}"
                    )));
                }
            }
            if row.iter().any(|&m| m as usize >= n_in) {
                return Err(Error::invalid(format!(
                    "connection row {f} references a map >= {n_in}: {row:?}"
                )));
            }
        }
        Ok(ConvLayer {
            n_in,
            n_out,
            kernel,
            fan_in,
            connections,
            weights: Tensor::zeros(&[n_out, fan_in, kernel, kernel])?,
            bias: Tensor::zeros(&[n_out])?,
        })
    }

    /// Densely connected layer (every filter reads every input map).
    pub fn dense(n_in: usize, n_out: usize, kernel: usize) -> Result<Self> {
        let connections: Vec<u32> = (0..n_out)
            .flat_map(|_| (0..n_in as u32).collect::<Vec<_>>())
            .collect();
        Self::with_connections(n_in, n_out, kernel, connections)
    }

    /// Sparsely connected layer: each filter draws `fan_in` distinct input
    /// maps uniformly (then sorts them), one filter at a time from `rng`.
    pub fn sparse_random(
        n_in: usize,
        n_out: usize,
        kernel: usize,
        fan_in: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if fan_in == 0 || fan_in > n_in {
            return Err(Error::invalid(format!(
                "fan_in {fan_in} must be in 1..={n_in}"
            )));
        }
        let mut connections = Vec::with_capacity(n_out * fan_in);
        for _ in 0..n_out {
            let mut row: Vec<usize> = rng.sample_distinct(n_in, fan_in);
            row.sort_unstable();
            connections.extend(row.into_iter().map(|m| m as u32));
        }
        Self::with_connections(n_in, n_out, kernel, connections)
    }

    pub fn connection_row(&self, filter: usize) -> &[u32] {
        &self.connections[filter * self.fan_in..(filter + 1) * self.fan_in]
    }

    /// Learnable scalar count: weights plus one bias per filter.
    pub fn param_count(&self) -> usize {
        self.n_out * self.fan_in * self.kernel * self.kernel + self.n_out
    }

    pub fn output_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < self.kernel || w < self.kernel {
            return Err(Error::shape(format!(
                "input {h}x{w} is smaller than the {k}x{k} kernel",
                k = self.kernel
            )));
        }
        Ok((h - self.kernel + 1, w - self.kernel + 1))
    }

    fn check_input(&self, input: &Tensor<E>) -> Result<(usize, usize)> {
        let shape = input.shape();
        if shape.len() != 3 || shape[0] != self.n_in {
            return Err(Error::shape(format!(
                "conv expects [{}, h, w], got {shape:?}",
                self.n_in
            )));
        }
        self.output_spatial(shape[1], shape[2])
    }

    /// `out[f] = bias[f] + sum over connected maps of the valid correlation
    /// of the input map with the filter slice`.
    pub fn forward(&self, input: &Tensor<E>) -> Result<Tensor<E>> {
        let (oh, ow) = self.check_input(input)?;
        let (h, w) = (input.shape()[1], input.shape()[2]);
        let mut out = Tensor::zeros(&[self.n_out, oh, ow])?;
        if ow >= ROW_PATH_MIN_OW {
            let geom = Geometry { h, w, oh, ow, k: self.kernel };
            let w_data = self.weights.data();
            let mut f = 0;
            while f < self.n_out {
                // Filters with identical connection rows (always true for
                // dense layers) share input-row loads four at a time.
                let row = self.connection_row(f);
                let mut run = 1;
                while f + run < self.n_out && run < 4 && self.connection_row(f + run) == row {
                    run += 1;
                }
                let kk = self.kernel * self.kernel;
                let plane = oh * ow;
                if run == 4 {
                    let (biases, w_bases) = (
                        [
                            self.bias.data()[f],
                            self.bias.data()[f + 1],
                            self.bias.data()[f + 2],
                            self.bias.data()[f + 3],
                        ],
                        [
                            f * self.fan_in * kk,
                            (f + 1) * self.fan_in * kk,
                            (f + 2) * self.fan_in * kk,
                            (f + 3) * self.fan_in * kk,
                        ],
                    );
                    let srcs: Vec<(u32, u32)> = row
                        .iter()
                        .enumerate()
                        .map(|(j, &m)| (m, j as u32))
                        .collect();
                    let (p0, tail) = out.data_mut()[f * plane..].split_at_mut(plane);
                    let (p1, tail) = tail.split_at_mut(plane);
                    let (p2, tail) = tail.split_at_mut(plane);
                    dispatch_kernel!(
                        self.kernel,
                        corr_plane_x4(
                            [p0, p1, p2, &mut tail[..plane]],
                            biases,
                            &srcs,
                            w_data,
                            w_bases,
                            input.data(),
                            &geom
                        )
                    );
                    f += 4;
                } else {
                    for r in 0..run {
                        let fi = f + r;
                        let srcs: Vec<(u32, u32)> = self
                            .connection_row(fi)
                            .iter()
                            .enumerate()
                            .map(|(j, &m)| (m, j as u32))
                            .collect();
                        let plane_out = &mut out.data_mut()[fi * plane..(fi + 1) * plane];
                        dispatch_kernel!(
                            self.kernel,
                            corr_plane(
                                plane_out,
                                self.bias.data()[fi],
                                &srcs,
                                w_data,
                                fi * self.fan_in * kk,
                                input.data(),
                                &geom
                            )
                        );
                    }
                    f += run;
                }
            }
        } else {
            self.forward_cells(input.data(), h, w, oh, ow, out.data_mut());
        }
        Ok(out)
    }

    /// Gathers `[n_in, k*k, cells]` columns so the accumulator can run
    /// across output cells.
    fn im2col(&self, in_data: &[E], h: usize, w: usize, oh: usize, ow: usize) -> Vec<E> {
        let k = self.kernel;
        let cells = oh * ow;
        let mut col = vec![E::ZERO; self.n_in * k * k * cells];
        for m in 0..self.n_in {
            let plane = &in_data[m * h * w..(m + 1) * h * w];
            for dy in 0..k {
                for dx in 0..k {
                    let dst = &mut col[(m * k * k + dy * k + dx) * cells..][..cells];
                    for y in 0..oh {
                        let src = &plane[(y + dy) * w + dx..][..ow];
                        dst[y * ow..(y + 1) * ow].copy_from_slice(src);
                    }
                }
            }
        }
        col
    }

    fn forward_cells(&self, in_data: &[E], h: usize, w: usize, oh: usize, ow: usize, out: &mut [E]) {
        let k = self.kernel;
        let kk = k * k;
        let cells = oh * ow;
        let col = self.im2col(in_data, h, w, oh, ow);
        let w_data = self.weights.data();
        for f in 0..self.n_out {
            let conns = self.connection_row(f);
            let bias = self.bias.data()[f];
            let w_base = f * self.fan_in * kk;
            let plane = &mut out[f * cells..(f + 1) * cells];
            let mut c0 = 0;
            while c0 + 16 <= cells {
                let acc = cell_chunk::<E, 16>(bias, conns, w_data, w_base, &col, kk, cells, c0);
                plane[c0..c0 + 16].copy_from_slice(&acc);
                c0 += 16;
            }
            if c0 + 8 <= cells {
                let acc = cell_chunk::<E, 8>(bias, conns, w_data, w_base, &col, kk, cells, c0);
                plane[c0..c0 + 8].copy_from_slice(&acc);
                c0 += 8;
            }
            for c in c0..cells {
                let mut acc = bias;
                for (j, &m) in conns.iter().enumerate() {
                    let wf = &w_data[w_base + j * kk..][..kk];
                    for t in 0..kk {
                        acc = wf[t].mul_add(col[(m as usize * kk + t) * cells + c], acc);
                    }
                }
                plane[c] = acc;
            }
        }
    }

    /// Analytic gradients of [`Self::forward`].
    ///
    /// Returns `(grad_input, grad_weights, grad_bias)`; `grad_input` is
    /// skipped when `want_grad_input` is false (first layer of a network).
    pub fn backward(
        &self,
        input: &Tensor<E>,
        grad_out: &Tensor<E>,
        want_grad_input: bool,
    ) -> Result<(Option<Tensor<E>>, Tensor<E>, Tensor<E>)> {
        let (oh, ow) = self.check_input(input)?;
        if grad_out.shape() != [self.n_out, oh, ow] {
            return Err(Error::shape(format!(
                "grad_out shape {:?} does not match conv output [{}, {oh}, {ow}]",
                grad_out.shape(),
                self.n_out
            )));
        }
        let (h, w) = (input.shape()[1], input.shape()[2]);
        let in_data = input.data();
        let g_data = grad_out.data();

        let mut grad_b = Tensor::zeros(&[self.n_out])?;
        for f in 0..self.n_out {
            let mut acc = E::ZERO;
            for &g in &g_data[f * oh * ow..(f + 1) * oh * ow] {
                acc += g;
            }
            grad_b.data_mut()[f] = acc;
        }

        let mut grad_w = Tensor::zeros(self.weights.shape())?;
        if ow >= ROW_PATH_MIN_OW {
            dispatch_kernel!(
                self.kernel,
                grad_weights_rows(self, in_data, g_data, h, w, oh, ow, grad_w.data_mut())
            );
        } else {
            let col = self.im2col(in_data, h, w, oh, ow);
            self.grad_weights_cells(&col, g_data, oh * ow, grad_w.data_mut());
        }

        let grad_in = if want_grad_input {
            let mut gi = Tensor::zeros(input.shape())?;
            self.grad_input(g_data, h, w, oh, ow, gi.data_mut());
            Some(gi)
        } else {
            None
        };
        Ok((grad_in, grad_w, grad_b))
    }

    fn grad_weights_cells(&self, col: &[E], g_data: &[E], cells: usize, grad_w: &mut [E]) {
        let kk = self.kernel * self.kernel;
        for f in 0..self.n_out {
            let g_plane = &g_data[f * cells..(f + 1) * cells];
            for (j, &m) in self.connection_row(f).iter().enumerate() {
                let gw = &mut grad_w[(f * self.fan_in + j) * kk..][..kk];
                for t in 0..kk {
                    gw[t] = plane_dot(g_plane, &col[(m as usize * kk + t) * cells..][..cells]);
                }
            }
        }
    }

    /// The input gradient is the valid correlation of the zero-padded
    /// output gradient with the flipped filters, evaluated with the same
    /// row kernel as the forward pass through a reverse connection map.
    fn grad_input(&self, g_data: &[E], h: usize, w: usize, oh: usize, ow: usize, gi: &mut [E]) {
        let k = self.kernel;
        let kk = k * k;
        let pad = k - 1;
        let (ph, pw) = (oh + 2 * pad, ow + 2 * pad);

        // Zero-padded gradient planes.
        let mut gpad = vec![E::ZERO; self.n_out * ph * pw];
        for f in 0..self.n_out {
            for y in 0..oh {
                let src = &g_data[f * oh * ow + y * ow..][..ow];
                gpad[(f * ph + y + pad) * pw + pad..][..ow].copy_from_slice(src);
            }
        }

        // Flipped filters, grouped by input map: for map m the sources are
        // the (filter plane, flipped-weight slot) pairs that read it.
        let w_data = self.weights.data();
        let mut srcs_by_map: Vec<Vec<(u32, u32)>> = vec![Vec::new(); self.n_in];
        let mut flipped = Vec::with_capacity(self.n_out * self.fan_in * kk);
        let mut slot = 0u32;
        for f in 0..self.n_out {
            for (j, &m) in self.connection_row(f).iter().enumerate() {
                let wf = &w_data[(f * self.fan_in + j) * kk..][..kk];
                for t in 0..kk {
                    flipped.push(wf[kk - 1 - t]);
                }
                srcs_by_map[m as usize].push((f as u32, slot));
                slot += 1;
            }
        }

        let geom = Geometry { h: ph, w: pw, oh: h, ow: w, k };
        for m in 0..self.n_in {
            if srcs_by_map[m].is_empty() {
                continue;
            }
            let plane = &mut gi[m * h * w..(m + 1) * h * w];
            dispatch_kernel!(
                k,
                corr_plane(plane, E::ZERO, &srcs_by_map[m], &flipped, 0, &gpad, &geom)
            );
        }
    }
}

/// Spatial geometry of one correlation: source planes are `h x w`, the
/// output is `oh x ow` with kernel `k` (`oh = h - k + 1`).
struct Geometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
}

/// Valid correlation of source planes into one output plane.
///
/// `srcs` lists (source plane, weight slot) pairs; weight slot `s` means
/// the `k*k` coefficients at `w_data[w_base + s * k * k..]`. Row chunks of
/// 32/24/16/8 columns are accumulated in four independent register chains
/// (see [`row_chunk`]); the scalar tail keeps a single chain.
fn corr_plane<E: Element, const K: usize>(
    out: &mut [E],
    bias: E,
    srcs: &[(u32, u32)],
    w_data: &[E],
    w_base: usize,
    planes: &[E],
    geom: &Geometry,
) {
    let k = if K > 0 { K } else { geom.k };
    let (oh, ow) = (geom.oh, geom.ow);
    for y in 0..oh {
        let row = &mut out[y * ow..(y + 1) * ow];
        let mut x0 = 0;
        while x0 + 32 <= ow {
            let acc = row_chunk::<E, 32, K>(bias, srcs, w_data, w_base, planes, geom, y, x0);
            row[x0..x0 + 32].copy_from_slice(&acc);
            x0 += 32;
        }
        if x0 + 24 <= ow {
            let acc = row_chunk::<E, 24, K>(bias, srcs, w_data, w_base, planes, geom, y, x0);
            row[x0..x0 + 24].copy_from_slice(&acc);
            x0 += 24;
        }
        if x0 + 16 <= ow {
            let acc = row_chunk::<E, 16, K>(bias, srcs, w_data, w_base, planes, geom, y, x0);
            row[x0..x0 + 16].copy_from_slice(&acc);
            x0 += 16;
        }
        if x0 + 8 <= ow {
            let acc = row_chunk::<E, 8, K>(bias, srcs, w_data, w_base, planes, geom, y, x0);
            row[x0..x0 + 8].copy_from_slice(&acc);
            x0 += 8;
        }
        for x in x0..ow {
            let mut acc = bias;
            for &(m, s) in srcs {
                let plane = &planes[m as usize * geom.h * geom.w..];
                let wf = &w_data[w_base + s as usize * k * k..];
                for dy in 0..k {
                    let in_row = &plane[(y + dy) * geom.w + x..];
                    for t in 0..k {
                        acc = wf[dy * k + t].mul_add(in_row[t], acc);
                    }
                }
            }
            row[x] = acc;
        }
    }
}

/// Four-filter variant of [`corr_plane`] for filters sharing one
/// connection row: every input row chunk is loaded once and feeds four
/// independent accumulators, one per filter.
fn corr_plane_x4<E: Element, const K: usize>(
    outs: [&mut [E]; 4],
    biases: [E; 4],
    srcs: &[(u32, u32)],
    w_data: &[E],
    w_bases: [usize; 4],
    planes: &[E],
    geom: &Geometry,
) {
    let k = if K > 0 { K } else { geom.k };
    let (oh, ow) = (geom.oh, geom.ow);
    let [o0, o1, o2, o3] = outs;
    for y in 0..oh {
        let mut x0 = 0;
        while x0 + 16 <= ow {
            let acc = row_chunk_x4::<E, 16, K>(biases, srcs, w_data, w_bases, planes, geom, y, x0);
            o0[y * ow + x0..y * ow + x0 + 16].copy_from_slice(&acc[0]);
            o1[y * ow + x0..y * ow + x0 + 16].copy_from_slice(&acc[1]);
            o2[y * ow + x0..y * ow + x0 + 16].copy_from_slice(&acc[2]);
            o3[y * ow + x0..y * ow + x0 + 16].copy_from_slice(&acc[3]);
            x0 += 16;
        }
        if x0 + 8 <= ow {
            let acc = row_chunk_x4::<E, 8, K>(biases, srcs, w_data, w_bases, planes, geom, y, x0);
            o0[y * ow + x0..y * ow + x0 + 8].copy_from_slice(&acc[0]);
            o1[y * ow + x0..y * ow + x0 + 8].copy_from_slice(&acc[1]);
            o2[y * ow + x0..y * ow + x0 + 8].copy_from_slice(&acc[2]);
            o3[y * ow + x0..y * ow + x0 + 8].copy_from_slice(&acc[3]);
            x0 += 8;
        }
        for x in x0..ow {
            for (i, out) in [&mut *o0, &mut *o1, &mut *o2, &mut *o3].into_iter().enumerate() {
                let mut acc = biases[i];
                for &(m, s) in srcs {
                    let plane = &planes[m as usize * geom.h * geom.w..];
                    let wf = &w_data[w_bases[i] + s as usize * k * k..];
                    for dy in 0..k {
                        let in_row = &plane[(y + dy) * geom.w + x..];
                        for t in 0..k {
                            acc = wf[dy * k + t].mul_add(in_row[t], acc);
                        }
                    }
                }
                out[y * ow + x] = acc;
            }
        }
    }
}

/// One output-row chunk of [`corr_plane`]: four independent tap-interleaved
/// accumulator chains, combined in a fixed order.
///
/// Deliberately not inlined: each (width, kernel) instantiation stays a
/// small standalone function whose accumulators fit cleanly in vector
/// registers.
#[inline(never)]
#[allow(clippy::too_many_arguments)]
fn row_chunk<E: Element, const L: usize, const K: usize>(
    bias: E,
    srcs: &[(u32, u32)],
    w_data: &[E],
    w_base: usize,
    planes: &[E],
    geom: &Geometry,
    y: usize,
    x0: usize,
) -> [E; L] {
    let k = if K > 0 { K } else { geom.k };
    let mut a0 = [bias; L];
    let mut a1 = [E::ZERO; L];
    let mut a2 = [E::ZERO; L];
    let mut a3 = [E::ZERO; L];
    for &(m, s) in srcs {
        let plane = &planes[m as usize * geom.h * geom.w..(m as usize + 1) * geom.h * geom.w];
        let wf = &w_data[w_base + s as usize * k * k..][..k * k];
        for dy in 0..k {
            let in_row = &plane[(y + dy) * geom.w + x0..][..L + k - 1];
            let wrow = &wf[dy * k..(dy + 1) * k];
            let mut t = 0;
            while t + 4 <= k {
                let (w0, w1, w2, w3) = (wrow[t], wrow[t + 1], wrow[t + 2], wrow[t + 3]);
                for l in 0..L {
                    a0[l] = w0.mul_add(in_row[t + l], a0[l]);
                    a1[l] = w1.mul_add(in_row[t + 1 + l], a1[l]);
                    a2[l] = w2.mul_add(in_row[t + 2 + l], a2[l]);
                    a3[l] = w3.mul_add(in_row[t + 3 + l], a3[l]);
                }
                t += 4;
            }
            if t + 2 <= k {
                let (w0, w1) = (wrow[t], wrow[t + 1]);
                for l in 0..L {
                    a0[l] = w0.mul_add(in_row[t + l], a0[l]);
                    a1[l] = w1.mul_add(in_row[t + 1 + l], a1[l]);
                }
                t += 2;
            }
            if t < k {
                let w0 = wrow[t];
                for l in 0..L {
                    a2[l] = w0.mul_add(in_row[t + l], a2[l]);
                }
            }
        }
    }
    let mut acc = [E::ZERO; L];
    for l in 0..L {
        acc[l] = ((a0[l] + a1[l]) + a2[l]) + a3[l];
    }
    acc
}

/// One output-row chunk for four filters sharing a connection row: one
/// accumulator chain per filter, input rows loaded once.
#[inline(never)]
fn row_chunk_x4<E: Element, const L: usize, const K: usize>(
    biases: [E; 4],
    srcs: &[(u32, u32)],
    w_data: &[E],
    w_bases: [usize; 4],
    planes: &[E],
    geom: &Geometry,
    y: usize,
    x0: usize,
) -> [[E; L]; 4] {
    let k = if K > 0 { K } else { geom.k };
    let mut a0 = [biases[0]; L];
    let mut a1 = [biases[1]; L];
    let mut a2 = [biases[2]; L];
    let mut a3 = [biases[3]; L];
    for &(m, s) in srcs {
        let plane = &planes[m as usize * geom.h * geom.w..(m as usize + 1) * geom.h * geom.w];
        let base = s as usize * k * k;
        let w0 = &w_data[w_bases[0] + base..][..k * k];
        let w1 = &w_data[w_bases[1] + base..][..k * k];
        let w2 = &w_data[w_bases[2] + base..][..k * k];
        let w3 = &w_data[w_bases[3] + base..][..k * k];
        for dy in 0..k {
            let in_row = &plane[(y + dy) * geom.w + x0..][..L + k - 1];
            for t in 0..k {
                let (c0, c1, c2, c3) = (
                    w0[dy * k + t],
                    w1[dy * k + t],
                    w2[dy * k + t],
                    w3[dy * k + t],
                );
                for l in 0..L {
                    let v = in_row[t + l];
                    a0[l] = c0.mul_add(v, a0[l]);
                    a1[l] = c1.mul_add(v, a1[l]);
                    a2[l] = c2.mul_add(v, a2[l]);
                    a3[l] = c3.mul_add(v, a3[l]);
                }
            }
        }
    }
    [a0, a1, a2, a3]
}

/// Tap gradients for the row strategy: for each filter slot and kernel
/// row, up to four tap columns accumulate simultaneously over the whole
/// plane, sharing the gradient loads.
#[allow(clippy::too_many_arguments)]
fn grad_weights_rows<E: Element, const K: usize>(
    layer: &ConvLayer<E>,
    in_data: &[E],
    g_data: &[E],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    grad_w: &mut [E],
) {
    let k = if K > 0 { K } else { layer.kernel };
    for f in 0..layer.n_out {
        let g_plane = &g_data[f * oh * ow..(f + 1) * oh * ow];
        for (j, &m) in layer.connection_row(f).iter().enumerate() {
            let in_plane = &in_data[m as usize * h * w..(m as usize + 1) * h * w];
            let gw = &mut grad_w[(f * layer.fan_in + j) * k * k..][..k * k];
            for dy in 0..k {
                let mut t = 0;
                while t + 4 <= k {
                    let taps = tap_group_dot::<E, 4>(g_plane, in_plane, oh, ow, w, dy, t);
                    gw[dy * k + t..dy * k + t + 4].copy_from_slice(&taps);
                    t += 4;
                }
                if t + 2 <= k {
                    let taps = tap_group_dot::<E, 2>(g_plane, in_plane, oh, ow, w, dy, t);
                    gw[dy * k + t..dy * k + t + 2].copy_from_slice(&taps);
                    t += 2;
                }
                if t < k {
                    let taps = tap_group_dot::<E, 1>(g_plane, in_plane, oh, ow, w, dy, t);
                    gw[dy * k + t] = taps[0];
                }
            }
        }
    }
}

/// `T` simultaneous tap dots: `result[i] = sum_{y,x} g[y][x] *
/// in[(y+dy)][x + t0 + i]`, with 16-lane accumulators per tap combined in
/// a fixed order.
fn tap_group_dot<E: Element, const T: usize>(
    g_plane: &[E],
    in_plane: &[E],
    oh: usize,
    ow: usize,
    w: usize,
    dy: usize,
    t0: usize,
) -> [E; T] {
    const L: usize = 16;
    let mut acc = [[E::ZERO; L]; T];
    let mut rest = [E::ZERO; T];
    for y in 0..oh {
        let g = &g_plane[y * ow..(y + 1) * ow];
        let s = &in_plane[(y + dy) * w + t0..][..ow + T - 1];
        let mut x = 0;
        while x + L <= ow {
            for i in 0..T {
                let src = &s[x + i..x + i + L];
                let gx = &g[x..x + L];
                for l in 0..L {
                    acc[i][l] = gx[l].mul_add(src[l], acc[i][l]);
                }
            }
            x += L;
        }
        while x < ow {
            for i in 0..T {
                rest[i] = g[x].mul_add(s[x + i], rest[i]);
            }
            x += 1;
        }
    }
    let mut out = [E::ZERO; T];
    for i in 0..T {
        let mut total = rest[i];
        for l in 0..L {
            total += acc[i][l];
        }
        out[i] = total;
    }
    out
}

/// Accumulates `L` consecutive output cells from the im2col buffer, in
/// exactly the naive per-cell (connection, tap) order.
#[inline(never)]
fn cell_chunk<E: Element, const L: usize>(
    bias: E,
    conns: &[u32],
    w_data: &[E],
    w_base: usize,
    col: &[E],
    kk: usize,
    cells: usize,
    c0: usize,
) -> [E; L] {
    let mut acc = [bias; L];
    for (j, &m) in conns.iter().enumerate() {
        let wf = &w_data[w_base + j * kk..][..kk];
        for t in 0..kk {
            let wv = wf[t];
            let src = &col[(m as usize * kk + t) * cells + c0..][..L];
            for l in 0..L {
                acc[l] = wv.mul_add(src[l], acc[l]);
            }
        }
    }
    acc
}

/// Dot product with 16/8/scalar lane groups, combined in a fixed order.
#[inline]
fn plane_dot<E: Element>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc16 = [E::ZERO; 16];
    let mut acc8 = [E::ZERO; 8];
    let mut rest = E::ZERO;
    let mut x = 0;
    while x + 16 <= n {
        for l in 0..16 {
            acc16[l] = a[x + l].mul_add(b[x + l], acc16[l]);
        }
        x += 16;
    }
    if x + 8 <= n {
        for l in 0..8 {
            acc8[l] = a[x + l].mul_add(b[x + l], acc8[l]);
        }
        x += 8;
    }
    while x < n {
        rest = a[x].mul_add(b[x], rest);
        x += 1;
    }
    let mut total = rest;
    for v in acc8 {
        total += v;
    }
    for v in acc16 {
        total += v;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor_from(shape: &[usize], vals: &[f32]) -> Tensor {
        Tensor::from_vec(shape, vals.to_vec()).unwrap()
    }

    /// Reference implementation: direct per-cell loops with the same fused
    /// multiply-add accumulation order.
    fn naive_forward(layer: &ConvLayer<f32>, input: &Tensor<f32>) -> Tensor<f32> {
        let (h, w) = (input.shape()[1], input.shape()[2]);
        let (oh, ow) = (h - layer.kernel + 1, w - layer.kernel + 1);
        let mut out = Tensor::zeros(&[layer.n_out, oh, ow]).unwrap();
        for f in 0..layer.n_out {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = layer.bias.data()[f];
                    for (j, &m) in layer.connection_row(f).iter().enumerate() {
                        for ky in 0..layer.kernel {
                            for kx in 0..layer.kernel {
                                let wv = layer.weights.at(&[f, j, ky, kx]);
                                acc = wv.mul_add(input.at(&[m as usize, y + ky, x + kx]), acc);
                            }
                        }
                    }
                    out.data_mut()[(f * oh + y) * ow + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn sum_of_window() {
        // 3x3 input of ones against a 3x3 filter of ones collapses to the
        // window sum plus bias.
        let mut layer = ConvLayer::<f32>::dense(1, 1, 3).unwrap();
        layer.weights.fill(1.0);
        let input = Tensor::filled(&[1, 3, 3], 1.0).unwrap();
        let out = layer.forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data()[0], 9.0);
    }

    #[test]
    fn delta_kernel_shifts() {
        // A filter with a single 1 at kernel position (0, 2) selects the
        // input window shifted by that offset.
        let mut layer = ConvLayer::<f32>::dense(1, 1, 3).unwrap();
        layer.weights.data_mut()[2] = 1.0;
        let vals: Vec<f32> = (0..25).map(|v| v as f32).collect();
        let input = tensor_from(&[1, 5, 5], &vals);
        let out = layer.forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(out.at(&[0, y, x]), input.at(&[0, y, x + 2]));
            }
        }
    }

    #[test]
    fn matches_naive_oracle_exactly() {
        // Direct quadruple-loop correlation with the same fused
        // multiply-add accumulation order must agree bit for bit (narrow
        // outputs keep the naive order exactly).
        let mut rng = Rng::new(7);
        let mut layer = ConvLayer::<f32>::dense(1, 2, 3).unwrap();
        layer.weights = Tensor::random_uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut rng).unwrap();
        layer.bias = Tensor::random_uniform(&[2], -0.5, 0.5, &mut rng).unwrap();
        let input = Tensor::random_uniform(&[1, 8, 8], -2.0, 2.0, &mut rng).unwrap();
        let out = layer.forward(&input).unwrap();
        assert_eq!(out.shape(), &[2, 6, 6]);
        assert_eq!(out, naive_forward(&layer, &input));
    }

    #[test]
    fn row_strategy_matches_naive_within_rounding() {
        // Wide outputs reassociate across four accumulator chains; values
        // agree with the naive order within floating-point slack.
        let mut rng = Rng::new(19);
        for (n_in, n_out, fan, k, side) in
            [(3usize, 2usize, 2usize, 5usize, 30usize), (1, 8, 1, 7, 64), (4, 4, 4, 3, 40)]
        {
            let mut layer = if fan == n_in {
                ConvLayer::<f32>::dense(n_in, n_out, k).unwrap()
            } else {
                ConvLayer::<f32>::sparse_random(n_in, n_out, k, fan, &mut rng).unwrap()
            };
            layer.weights =
                Tensor::random_uniform(layer.weights.shape(), -1.0, 1.0, &mut rng).unwrap();
            layer.bias =
                Tensor::random_uniform(&[n_out], -0.5, 0.5, &mut rng).unwrap();
            let input =
                Tensor::random_uniform(&[n_in, side, side], -1.0, 1.0, &mut rng).unwrap();
            let got = layer.forward(&input).unwrap();
            let expect = naive_forward(&layer, &input);
            for (a, b) in got.data().iter().zip(expect.data()) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn cells_strategy_matches_naive_exactly() {
        let mut rng = Rng::new(20);
        let mut narrow = ConvLayer::<f32>::sparse_random(5, 4, 5, 3, &mut rng).unwrap();
        narrow.weights =
            Tensor::random_uniform(narrow.weights.shape(), -1.0, 1.0, &mut rng).unwrap();
        narrow.bias = Tensor::random_uniform(&[4], -0.5, 0.5, &mut rng).unwrap();
        let input = Tensor::random_uniform(&[5, 9, 9], -1.0, 1.0, &mut rng).unwrap();
        assert_eq!(
            narrow.forward(&input).unwrap(),
            naive_forward(&narrow, &input)
        );
    }

    #[test]
    fn sparse_table_matches_naive_oracle() {
        let mut rng = Rng::new(21);
        let mut layer = ConvLayer::<f32>::sparse_random(4, 3, 2, 2, &mut rng).unwrap();
        layer.weights = Tensor::random_uniform(&[3, 2, 2, 2], -1.0, 1.0, &mut rng).unwrap();
        let input = Tensor::random_uniform(&[4, 5, 5], -1.0, 1.0, &mut rng).unwrap();
        assert_eq!(layer.forward(&input).unwrap(), naive_forward(&layer, &input));
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = Rng::new(3);
        let mut layer = ConvLayer::<f32>::dense(2, 2, 3).unwrap();
        layer.weights = Tensor::random_uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng).unwrap();
        let input = Tensor::random_uniform(&[2, 6, 6], -1.0, 1.0, &mut rng).unwrap();
        let grad_out = Tensor::zeros(&[2, 4, 4]).unwrap();
        let (gi, gw, gb) = layer.backward(&input, &grad_out, true).unwrap();
        assert!(gi.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
        assert!(gb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_grad_out_selects_input_window() {
        let mut rng = Rng::new(5);
        let layer = ConvLayer::<f32>::dense(1, 1, 3).unwrap();
        let input = Tensor::random_uniform(&[1, 5, 5], -1.0, 1.0, &mut rng).unwrap();
        let mut grad_out = Tensor::zeros(&[1, 3, 3]).unwrap();
        // Gradient arrives only at output position (1, 2).
        grad_out.data_mut()[3 + 2] = 1.0;
        let (_, gw, gb) = layer.backward(&input, &grad_out, false).unwrap();
        assert_eq!(gb.data()[0], 1.0);
        for ky in 0..3 {
            for kx in 0..3 {
                let got = gw.at(&[0, 0, ky, kx]);
                let expect = input.at(&[0, 1 + ky, 2 + kx]);
                assert!((got - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_matches_naive_oracle_on_both_strategies() {
        // The row/cells split must not change gradients beyond rounding;
        // compare against a naive accumulation oracle in f64.
        let mut rng = Rng::new(33);
        for (maps, side, k) in [(3usize, 22usize, 4usize), (3, 9, 4), (1, 20, 5)] {
            let fan = if maps == 1 { 1 } else { 2 };
            let mut layer = if fan == maps {
                ConvLayer::<f64>::dense(maps, 3, k).unwrap()
            } else {
                ConvLayer::<f64>::sparse_random(maps, 3, k, fan, &mut rng).unwrap()
            };
            layer.weights =
                Tensor::random_uniform(layer.weights.shape(), -1.0, 1.0, &mut rng).unwrap();
            let input = Tensor::random_uniform(&[maps, side, side], -1.0, 1.0, &mut rng).unwrap();
            let o = side - k + 1;
            let grad_out = Tensor::random_uniform(&[3, o, o], -1.0, 1.0, &mut rng).unwrap();
            let (gi, gw, gb) = layer.backward(&input, &grad_out, true).unwrap();

            // Naive oracle.
            let mut ngw = Tensor::<f64>::zeros(layer.weights.shape()).unwrap();
            let mut ngb = Tensor::<f64>::zeros(&[3]).unwrap();
            let mut ngi = Tensor::<f64>::zeros(input.shape()).unwrap();
            for f in 0..3 {
                for y in 0..o {
                    for x in 0..o {
                        let g = grad_out.at(&[f, y, x]);
                        ngb.data_mut()[f] += g;
                        for (j, &m) in layer.connection_row(f).iter().enumerate() {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let wi = ((f * layer.fan_in + j) * k + ky) * k + kx;
                                    ngw.data_mut()[wi] +=
                                        g * input.at(&[m as usize, y + ky, x + kx]);
                                    let ii = (m as usize * side + y + ky) * side + x + kx;
                                    ngi.data_mut()[ii] += g * layer.weights.data()[wi];
                                }
                            }
                        }
                    }
                }
            }
            let gi = gi.unwrap();
            for (a, b) in gi.data().iter().zip(ngi.data()) {
                assert!((a - b).abs() < 1e-10);
            }
            for (a, b) in gw.data().iter().zip(ngw.data()) {
                assert!((a - b).abs() < 1e-10);
            }
            for (a, b) in gb.data().iter().zip(ngb.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn too_small_input_is_an_error() {
        let layer = ConvLayer::<f32>::dense(1, 1, 5).unwrap();
        let input = Tensor::zeros(&[1, 4, 7]).unwrap();
        assert!(layer.forward(&input).is_err());
    }

    #[test]
    fn invalid_connection_tables_rejected() {
        // Duplicate entry.
        assert!(ConvLayer::<f32>::with_connections(4, 1, 3, vec![1, 1]).is_err());
        // Unsorted row.
        assert!(ConvLayer::<f32>::with_connections(4, 1, 3, vec![2, 0]).is_err());
        // Out-of-range map index.
        assert!(ConvLayer::<f32>::with_connections(4, 1, 3, vec![0, 4]).is_err());
    }

    #[test]
    fn param_count_dense_conv() {
        // 32 filters of 7x7 over one input map.
        let layer = ConvLayer::<f32>::dense(1, 32, 7).unwrap();
        assert_eq!(layer.param_count(), 32 * 49 + 32);
    }
}
