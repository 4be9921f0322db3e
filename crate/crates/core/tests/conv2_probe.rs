//! conv2-shaped kernel comparison. Run with
//! `cargo test -p patchdesc-core --test conv2_probe -- --ignored --nocapture`.

use std::time::Instant;

const FAN: usize = 16;
const K: usize = 6;
const OW: usize = 24;
const OH: usize = 24;
const W: usize = 29;
const H: usize = 29;
const NOUT: usize = 64;

// A: runtime-k, slice per tap (current row_chunk).
#[inline(always)]
fn chunk_a<const L: usize>(
    bias: f32,
    conns: &[u32],
    w_data: &[f32],
    w_base: usize,
    in_data: &[f32],
    k: usize,
    y: usize,
    x0: usize,
) -> [f32; L] {
    let mut acc = [bias; L];
    for (j, &m) in conns.iter().enumerate() {
        let in_plane = &in_data[m as usize * H * W..(m as usize + 1) * H * W];
        let wf = &w_data[w_base + j * k * k..][..k * k];
        for dy in 0..k {
            let in_row = &in_plane[(y + dy) * W + x0..][..L + k - 1];
            for t in 0..k {
                let wv = wf[dy * k + t];
                let src = &in_row[t..t + L];
                for l in 0..L {
                    acc[l] = wv.mul_add(src[l], acc[l]);
                }
            }
        }
    }
    acc
}

// B: const-K fully unrolled taps.
#[inline(always)]
fn chunk_b<const L: usize, const KC: usize>(
    bias: f32,
    conns: &[u32],
    w_data: &[f32],
    w_base: usize,
    in_data: &[f32],
    y: usize,
    x0: usize,
) -> [f32; L] {
    let mut acc = [bias; L];
    for (j, &m) in conns.iter().enumerate() {
        let in_plane = &in_data[m as usize * H * W..(m as usize + 1) * H * W];
        let wf = &w_data[w_base + j * KC * KC..][..KC * KC];
        for dy in 0..KC {
            let in_row = &in_plane[(y + dy) * W + x0..][..L + KC - 1];
            for t in 0..KC {
                let wv = wf[dy * KC + t];
                for l in 0..L {
                    acc[l] = wv.mul_add(in_row[t + l], acc[l]);
                }
            }
        }
    }
    acc
}

fn forward_a(conns: &[u32], w_data: &[f32], in_data: &[f32], out: &mut [f32]) {
    for f in 0..NOUT {
        let cr = &conns[f * FAN..(f + 1) * FAN];
        let w_base = f * FAN * K * K;
        let plane = &mut out[f * OH * OW..(f + 1) * OH * OW];
        for y in 0..OH {
            let row = &mut plane[y * OW..(y + 1) * OW];
            let acc = chunk_a::<16>(0.1, cr, w_data, w_base, in_data, K, y, 0);
            row[..16].copy_from_slice(&acc);
            let acc = chunk_a::<8>(0.1, cr, w_data, w_base, in_data, K, y, 16);
            row[16..24].copy_from_slice(&acc);
        }
    }
}

fn forward_b(conns: &[u32], w_data: &[f32], in_data: &[f32], out: &mut [f32]) {
    for f in 0..NOUT {
        let cr = &conns[f * FAN..(f + 1) * FAN];
        let w_base = f * FAN * K * K;
        let plane = &mut out[f * OH * OW..(f + 1) * OH * OW];
        for y in 0..OH {
            let row = &mut plane[y * OW..(y + 1) * OW];
            let acc = chunk_b::<16, K>(0.1, cr, w_data, w_base, in_data, y, 0);
            row[..16].copy_from_slice(&acc);
            let acc = chunk_b::<8, K>(0.1, cr, w_data, w_base, in_data, y, 16);
            row[16..24].copy_from_slice(&acc);
        }
    }
}

// C: 24-wide single chunk (whole row in registers).
fn forward_c(conns: &[u32], w_data: &[f32], in_data: &[f32], out: &mut [f32]) {
    for f in 0..NOUT {
        let cr = &conns[f * FAN..(f + 1) * FAN];
        let w_base = f * FAN * K * K;
        let plane = &mut out[f * OH * OW..(f + 1) * OH * OW];
        for y in 0..OH {
            let row = &mut plane[y * OW..(y + 1) * OW];
            let acc = chunk_b::<24, K>(0.1, cr, w_data, w_base, in_data, y, 0);
            row.copy_from_slice(&acc);
        }
    }
}

fn bench(name: &str, mut f: impl FnMut(&mut [f32])) {
    let mut out = vec![0.0f32; NOUT * OH * OW];
    for _ in 0..3 {
        f(&mut out);
    }
    let n = 30;
    let t0 = Instant::now();
    for _ in 0..n {
        f(&mut out);
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    let macs = (NOUT * FAN * K * K * OH * OW) as f64;
    println!("{name:<10} {:.3} ms  {:.1} GMAC/s", dt * 1e3, macs / dt / 1e9);
}

#[test]
#[ignore]
fn conv2_variants() {
    let in_data: Vec<f32> = (0..32 * H * W).map(|i| (i as f32 * 0.01).sin()).collect();
    let w_data: Vec<f32> = (0..NOUT * FAN * K * K).map(|i| (i as f32 * 0.1).cos() * 0.1).collect();
    let conns: Vec<u32> = (0..NOUT * FAN).map(|i| ((i * 7) % 32) as u32).collect();
    bench("A runtime", |o| forward_a(&conns, &w_data, &in_data, o));
    bench("B const-K", |o| forward_b(&conns, &w_data, &in_data, o));
    bench("C row24", |o| forward_c(&conns, &w_data, &in_data, o));
    bench("F 4acc24", |o| forward_f(&conns, &w_data, &in_data, o));
    bench("G 2row24", |o| forward_g(&conns, &w_data, &in_data, o));
    bench("H prod16+8", |o| forward_h(&conns, &w_data, &in_data, o));
}

// F: const-K, full-row 24-wide, 4-acc tap split.
#[inline(always)]
fn chunk_f<const L: usize, const KC: usize>(
    bias: f32,
    conns: &[u32],
    w_data: &[f32],
    w_base: usize,
    in_data: &[f32],
    y: usize,
    x0: usize,
) -> [f32; L] {
    let mut a0 = [bias; L];
    let mut a1 = [0f32; L];
    let mut a2 = [0f32; L];
    let mut a3 = [0f32; L];
    for (j, &m) in conns.iter().enumerate() {
        let in_plane = &in_data[m as usize * H * W..(m as usize + 1) * H * W];
        let wf = &w_data[w_base + j * KC * KC..][..KC * KC];
        for dy in 0..KC {
            let in_row = &in_plane[(y + dy) * W + x0..][..L + KC - 1];
            let mut t = 0;
            while t + 4 <= KC {
                let (w0, w1, w2, w3) = (wf[dy * KC + t], wf[dy * KC + t + 1], wf[dy * KC + t + 2], wf[dy * KC + t + 3]);
                for l in 0..L {
                    a0[l] = w0.mul_add(in_row[t + l], a0[l]);
                    a1[l] = w1.mul_add(in_row[t + 1 + l], a1[l]);
                    a2[l] = w2.mul_add(in_row[t + 2 + l], a2[l]);
                    a3[l] = w3.mul_add(in_row[t + 3 + l], a3[l]);
                }
                t += 4;
            }
            if t + 2 <= KC {
                let (w0, w1) = (wf[dy * KC + t], wf[dy * KC + t + 1]);
                for l in 0..L {
                    a0[l] = w0.mul_add(in_row[t + l], a0[l]);
                    a1[l] = w1.mul_add(in_row[t + 1 + l], a1[l]);
                }
                t += 2;
            }
            if t < KC {
                let w0 = wf[dy * KC + t];
                for l in 0..L {
                    a2[l] = w0.mul_add(in_row[t + l], a2[l]);
                }
            }
        }
    }
    let mut acc = [0f32; L];
    for l in 0..L {
        acc[l] = ((a0[l] + a1[l]) + a2[l]) + a3[l];
    }
    acc
}

fn forward_f(conns: &[u32], w_data: &[f32], in_data: &[f32], out: &mut [f32]) {
    for f in 0..NOUT {
        let cr = &conns[f * FAN..(f + 1) * FAN];
        let w_base = f * FAN * K * K;
        let plane = &mut out[f * OH * OW..(f + 1) * OH * OW];
        for y in 0..OH {
            let row = &mut plane[y * OW..(y + 1) * OW];
            let acc = chunk_f::<24, K>(0.1, cr, w_data, w_base, in_data, y, 0);
            row.copy_from_slice(&acc);
        }
    }
}

// G: const-K, two rows at once, 24-wide single acc each.
fn forward_g(conns: &[u32], w_data: &[f32], in_data: &[f32], out: &mut [f32]) {
    for f in 0..NOUT {
        let cr = &conns[f * FAN..(f + 1) * FAN];
        let w_base = f * FAN * K * K;
        let plane = &mut out[f * OH * OW..(f + 1) * OH * OW];
        let mut y = 0;
        while y + 2 <= OH {
            let mut acc0 = [0.1f32; OW];
            let mut acc1 = [0.1f32; OW];
            for (j, &m) in cr.iter().enumerate() {
                let in_plane = &in_data[m as usize * H * W..(m as usize + 1) * H * W];
                let wf = &w_data[w_base + j * K * K..][..K * K];
                for dy in 0..K {
                    let r0 = &in_plane[(y + dy) * W..][..OW + K - 1];
                    let r1 = &in_plane[(y + 1 + dy) * W..][..OW + K - 1];
                    for t in 0..K {
                        let wv = wf[dy * K + t];
                        for l in 0..OW {
                            acc0[l] = wv.mul_add(r0[t + l], acc0[l]);
                            acc1[l] = wv.mul_add(r1[t + l], acc1[l]);
                        }
                    }
                }
            }
            plane[y * OW..(y + 1) * OW].copy_from_slice(&acc0);
            plane[(y + 1) * OW..(y + 2) * OW].copy_from_slice(&acc1);
            y += 2;
        }
    }
}

// H: production-style: 16+8 chunks, 4-acc, const-K, src sub-slices.
#[inline(always)]
fn chunk_h<const L: usize, const KC: usize>(
    bias: f32,
    conns: &[u32],
    w_data: &[f32],
    w_base: usize,
    in_data: &[f32],
    y: usize,
    x0: usize,
) -> [f32; L] {
    let mut a0 = [bias; L];
    let mut a1 = [0f32; L];
    let mut a2 = [0f32; L];
    let mut a3 = [0f32; L];
    for (j, &m) in conns.iter().enumerate() {
        let in_plane = &in_data[m as usize * H * W..(m as usize + 1) * H * W];
        let wf = &w_data[w_base + j * KC * KC..][..KC * KC];
        for dy in 0..KC {
            let in_row = &in_plane[(y + dy) * W + x0..][..L + KC - 1];
            let wrow = &wf[dy * KC..(dy + 1) * KC];
            let mut t = 0;
            while t + 4 <= KC {
                let (w0, w1, w2, w3) = (wrow[t], wrow[t + 1], wrow[t + 2], wrow[t + 3]);
                let src = &in_row[t..t + 3 + L];
                for l in 0..L {
                    a0[l] = w0.mul_add(src[l], a0[l]);
                    a1[l] = w1.mul_add(src[l + 1], a1[l]);
                    a2[l] = w2.mul_add(src[l + 2], a2[l]);
                    a3[l] = w3.mul_add(src[l + 3], a3[l]);
                }
                t += 4;
            }
            if t + 2 <= KC {
                let (w0, w1) = (wrow[t], wrow[t + 1]);
                let src = &in_row[t..t + 1 + L];
                for l in 0..L {
                    a0[l] = w0.mul_add(src[l], a0[l]);
                    a1[l] = w1.mul_add(src[l + 1], a1[l]);
                }
                t += 2;
            }
            if t < KC {
                let w0 = wrow[t];
                let src = &in_row[t..t + L];
                for l in 0..L {
                    a2[l] = w0.mul_add(src[l], a2[l]);
                }
            }
        }
    }
    let mut acc = [0f32; L];
    for l in 0..L {
        acc[l] = ((a0[l] + a1[l]) + a2[l]) + a3[l];
    }
    acc
}

fn forward_h(conns: &[u32], w_data: &[f32], in_data: &[f32], out: &mut [f32]) {
    for f in 0..NOUT {
        let cr = &conns[f * FAN..(f + 1) * FAN];
        let w_base = f * FAN * K * K;
        let plane = &mut out[f * OH * OW..(f + 1) * OH * OW];
        for y in 0..OH {
            let row = &mut plane[y * OW..(y + 1) * OW];
            let acc = chunk_h::<16, K>(0.1, cr, w_data, w_base, in_data, y, 0);
            row[..16].copy_from_slice(&acc);
            let acc = chunk_h::<8, K>(0.1, cr, w_data, w_base, in_data, y, 16);
            row[16..24].copy_from_slice(&acc);
        }
    }
}
