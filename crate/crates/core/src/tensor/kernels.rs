//! CPU kernels behind the tensor ops.
//!
//! Every kernel computes each output element with a fixed accumulation
//! order, so results are bit-identical across runs regardless of the rayon
//! thread count: parallel splits never share an accumulator.

use rayon::prelude::*;

/// Work threshold below which kernels stay single-threaded.
const PAR_FLOPS: usize = 1 << 15;

/// Column tile width; keeps one B tile plus four C tiles inside L1.
const GEMM_NTILE: usize = 1024;
/// Rows of C produced per pass over B.
const GEMM_MR: usize = 4;

/// C = A·B (row-major, A: m×k, B: k×n). `accumulate` adds into C.
///
/// Row-blocked axpy kernel: each block of up to four C rows makes one pass
/// over B, tiled along n so the working set stays in L1.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let block = |i0: usize, cblock: &mut [f32]| {
        if !accumulate {
            cblock.fill(0.0);
        }
        let rows = cblock.len() / n;
        for jt in (0..n).step_by(GEMM_NTILE) {
            let jw = GEMM_NTILE.min(n - jt);
            for l in 0..k {
                let btile = &b[l * n + jt..l * n + jt + jw];
                for r in 0..rows {
                    let av = a[(i0 + r) * k + l];
                    let ctile = &mut cblock[r * n + jt..r * n + jt + jw];
                    for (cv, &bv) in ctile.iter_mut().zip(btile) {
                        *cv += av * bv;
                    }
                }
            }
        }
    };
    if m * k * n >= PAR_FLOPS && m > GEMM_MR {
        c.par_chunks_mut(GEMM_MR * n)
            .enumerate()
            .for_each(|(bi, cblock)| block(bi * GEMM_MR, cblock));
    } else {
        for (bi, cblock) in c.chunks_mut(GEMM_MR * n).enumerate() {
            block(bi * GEMM_MR, cblock);
        }
    }
}

/// Dot product with eight independent accumulator lanes (lane assignment is
/// fixed, so the result is deterministic and the loop vectorizes).
fn dot8(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            lanes[i] += xa[i] * xb[i];
        }
    }
    let mut tail = 0.0f32;
    for (&xa, &xb) in ca.remainder().iter().zip(cb.remainder()) {
        tail += xa * xb;
    }
    let lo = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    let hi = (lanes[4] + lanes[5]) + (lanes[6] + lanes[7]);
    (lo + hi) + tail
}

/// C = A·Bᵀ (A: m×k, B: n×k, C: m×n).
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, crow: &mut [f32]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let acc = dot8(arow, &b[j * k..(j + 1) * k]);
            if accumulate {
                *cv += acc;
            } else {
                *cv = acc;
            }
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
}

/// C = Aᵀ·B (A: k×m, B: k×n, C: m×n). Small shapes only (linear layers).
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], accumulate: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(0.0);
    }
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of a 2-D convolution over NCHW input and OIHW weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub fn conv_out_extent(h: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let eff = dilation * (k - 1) + 1;
    let padded = h + 2 * pad;
    if padded < eff {
        return None;
    }
    Some((padded - eff) / stride + 1)
}

fn is_depthwise(g: &ConvGeom) -> bool {
    g.groups == g.c_in && g.c_out == g.c_in
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0 && g.groups == 1
}

pub fn conv2d_fwd(x: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let mut y = vec![0.0f32; g.n * g.c_out * g.h_out * g.w_out];
    let hw = g.h * g.w;
    let hw_out = g.h_out * g.w_out;
    if is_pointwise(g) {
        y.par_chunks_mut(g.c_out * hw).enumerate().for_each(|(n, yn)| {
            gemm(g.c_out, g.c_in, hw, w, &x[n * g.c_in * hw..(n + 1) * g.c_in * hw], yn, false);
        });
    } else if is_depthwise(g) {
        let kk = g.k * g.k;
        y.par_chunks_mut(hw_out).enumerate().for_each(|(plane, yp)| {
            let c = plane % g.c_in;
            let xp = &x[plane * hw..(plane + 1) * hw];
            dw_plane_fwd(xp, &w[c * kk..(c + 1) * kk], yp, g);
        });
    } else {
        let cpg_in = g.c_in / g.groups;
        let cpg_out = g.c_out / g.groups;
        let krows = cpg_in * g.k * g.k;
        y.par_chunks_mut(g.c_out * hw_out).enumerate().for_each(|(n, yn)| {
            let mut col = vec![0.0f32; krows * hw_out];
            for gr in 0..g.groups {
                let xg = &x[(n * g.c_in + gr * cpg_in) * hw..(n * g.c_in + (gr + 1) * cpg_in) * hw];
                im2col(xg, cpg_in, g, &mut col);
                let wg = &w[gr * cpg_out * krows..(gr + 1) * cpg_out * krows];
                let yg = &mut yn[gr * cpg_out * hw_out..(gr + 1) * cpg_out * hw_out];
                gemm(cpg_out, krows, hw_out, wg, &col, yg, false);
            }
        });
    }
    y
}

/// Gradients (dx, dw) of `conv2d_fwd`.
pub fn conv2d_bwd(x: &[f32], w: &[f32], gout: &[f32], g: &ConvGeom) -> (Vec<f32>, Vec<f32>) {
    let hw = g.h * g.w;
    let hw_out = g.h_out * g.w_out;
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; w.len()];
    if is_pointwise(g) {
        // dX = Wᵀ·dY per sample, dW = Σ_n dY·Xᵀ with per-sample partials
        // reduced in a fixed order
        let mut wt = vec![0.0f32; w.len()];
        transpose(w, g.c_out, g.c_in, &mut wt);
        let mut dw_parts = vec![vec![0.0f32; w.len()]; g.n];
        dx.par_chunks_mut(g.c_in * hw)
            .zip(dw_parts.par_iter_mut())
            .enumerate()
            .for_each(|(n, (dxn, dwn))| {
                let go = &gout[n * g.c_out * hw..(n + 1) * g.c_out * hw];
                let xn = &x[n * g.c_in * hw..(n + 1) * g.c_in * hw];
                gemm(g.c_in, g.c_out, hw, &wt, go, dxn, false);
                gemm_nt(g.c_out, hw, g.c_in, go, xn, dwn, false);
            });
        for part in &dw_parts {
            for (d, &p) in dw.iter_mut().zip(part) {
                *d += p;
            }
        }
    } else if is_depthwise(g) {
        let kk = g.k * g.k;
        dx.par_chunks_mut(hw).enumerate().for_each(|(plane, dxp)| {
            let c = plane % g.c_in;
            dw_plane_bwd_input(&gout[plane * hw_out..(plane + 1) * hw_out], &w[c * kk..(c + 1) * kk], dxp, g);
        });
        dw.par_chunks_mut(kk).enumerate().for_each(|(c, dwc)| {
            for n in 0..g.n {
                let plane = n * g.c_in + c;
                dw_plane_bwd_weight(
                    &x[plane * hw..(plane + 1) * hw],
                    &gout[plane * hw_out..(plane + 1) * hw_out],
                    dwc,
                    g,
                );
            }
        });
    } else {
        let cpg_in = g.c_in / g.groups;
        let cpg_out = g.c_out / g.groups;
        let krows = cpg_in * g.k * g.k;
        let mut dw_parts = vec![vec![0.0f32; w.len()]; g.n];
        dx.par_chunks_mut(g.c_in * hw)
            .zip(dw_parts.par_iter_mut())
            .enumerate()
            .for_each(|(n, (dxn, dwn))| {
                let mut col = vec![0.0f32; krows * hw_out];
                let mut dcol = vec![0.0f32; krows * hw_out];
                let mut wt = vec![0.0f32; cpg_out * krows];
                for gr in 0..g.groups {
                    let x_off = (n * g.c_in + gr * cpg_in) * hw;
                    let y_off = (n * g.c_out + gr * cpg_out) * hw_out;
                    let wg = &w[gr * cpg_out * krows..(gr + 1) * cpg_out * krows];
                    let go = &gout[y_off..y_off + cpg_out * hw_out];
                    // dW += dY·colᵀ
                    im2col(&x[x_off..x_off + cpg_in * hw], cpg_in, g, &mut col);
                    gemm_nt(cpg_out, hw_out, krows, go, &col,
                        &mut dwn[gr * cpg_out * krows..(gr + 1) * cpg_out * krows], false);
                    // dcol = Wᵀ·dY, then scatter back
                    transpose(wg, cpg_out, krows, &mut wt);
                    gemm(krows, cpg_out, hw_out, &wt, go, &mut dcol, false);
                    col2im(&dcol, cpg_in, g, &mut dxn[gr * cpg_in * hw..(gr + 1) * cpg_in * hw]);
                }
            });
        for part in &dw_parts {
            for (d, &p) in dw.iter_mut().zip(part) {
                *d += p;
            }
        }
    }
    (dx, dw)
}

fn transpose(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Valid output range [lo, hi) so that `0 <= ox*stride + kx*dilation - pad < w`.
fn valid_range(extent: usize, out: usize, kx: usize, stride: usize, pad: usize, dil: usize) -> (usize, usize) {
    let shift = kx as isize * dil as isize - pad as isize;
    let lo = if shift >= 0 { 0 } else { ((-shift) as usize).div_ceil(stride) };
    // largest ox with ox*stride + shift <= extent-1
    let max_i = extent as isize - 1 - shift;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = (max_i as usize / stride + 1).min(out);
    (lo.min(hi), hi)
}

fn dw_plane_fwd(x: &[f32], wk: &[f32], y: &mut [f32], g: &ConvGeom) {
    for ky in 0..g.k {
        for kx in 0..g.k {
            let wv = wk[ky * g.k + kx];
            let (lo, hi) = valid_range(g.w, g.w_out, kx, g.stride, g.pad, g.dilation);
            for oy in 0..g.h_out {
                let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let xrow = &x[iy as usize * g.w..(iy as usize + 1) * g.w];
                let yrow = &mut y[oy * g.w_out..(oy + 1) * g.w_out];
                let shift = kx as isize * g.dilation as isize - g.pad as isize;
                if g.stride == 1 {
                    let base = (lo as isize + shift) as usize;
                    for (yv, &xv) in yrow[lo..hi].iter_mut().zip(&xrow[base..base + (hi - lo)]) {
                        *yv += wv * xv;
                    }
                } else {
                    for ox in lo..hi {
                        let ix = (ox * g.stride) as isize + shift;
                        yrow[ox] += wv * xrow[ix as usize];
                    }
                }
            }
        }
    }
}

fn dw_plane_bwd_input(gout: &[f32], wk: &[f32], dx: &mut [f32], g: &ConvGeom) {
    for ky in 0..g.k {
        for kx in 0..g.k {
            let wv = wk[ky * g.k + kx];
            let (lo, hi) = valid_range(g.w, g.w_out, kx, g.stride, g.pad, g.dilation);
            for oy in 0..g.h_out {
                let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let grow = &gout[oy * g.w_out..(oy + 1) * g.w_out];
                let dxrow = &mut dx[iy as usize * g.w..(iy as usize + 1) * g.w];
                let shift = kx as isize * g.dilation as isize - g.pad as isize;
                if g.stride == 1 {
                    let base = (lo as isize + shift) as usize;
                    for (dv, &gv) in dxrow[base..base + (hi - lo)].iter_mut().zip(&grow[lo..hi]) {
                        *dv += wv * gv;
                    }
                } else {
                    for ox in lo..hi {
                        let ix = (ox * g.stride) as isize + shift;
                        dxrow[ix as usize] += wv * grow[ox];
                    }
                }
            }
        }
    }
}

fn dw_plane_bwd_weight(x: &[f32], gout: &[f32], dwc: &mut [f32], g: &ConvGeom) {
    for ky in 0..g.k {
        for kx in 0..g.k {
            let (lo, hi) = valid_range(g.w, g.w_out, kx, g.stride, g.pad, g.dilation);
            let mut acc = 0.0f32;
            for oy in 0..g.h_out {
                let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let xrow = &x[iy as usize * g.w..(iy as usize + 1) * g.w];
                let grow = &gout[oy * g.w_out..(oy + 1) * g.w_out];
                let shift = kx as isize * g.dilation as isize - g.pad as isize;
                if g.stride == 1 {
                    let base = (lo as isize + shift) as usize;
                    acc += dot8(&grow[lo..hi], &xrow[base..base + (hi - lo)]);
                } else {
                    let mut s = 0.0f32;
                    for ox in lo..hi {
                        let ix = (ox * g.stride) as isize + shift;
                        s += grow[ox] * xrow[ix as usize];
                    }
                    acc += s;
                }
            }
            dwc[ky * g.k + kx] += acc;
        }
    }
}

fn im2col(x: &[f32], c: usize, g: &ConvGeom, col: &mut [f32]) {
    let hw_out = g.h_out * g.w_out;
    col.fill(0.0);
    let kk = g.k * g.k;
    col.par_chunks_mut(hw_out).enumerate().for_each(|(row, dst)| {
        let ch = row / kk;
        let ky = (row / g.k) % g.k;
        let kx = row % g.k;
        let xp = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        let (lo, hi) = valid_range(g.w, g.w_out, kx, g.stride, g.pad, g.dilation);
        let shift = kx as isize * g.dilation as isize - g.pad as isize;
        for oy in 0..g.h_out {
            let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            let xrow = &xp[iy as usize * g.w..(iy as usize + 1) * g.w];
            let drow = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
            if g.stride == 1 {
                let base = (lo as isize + shift) as usize;
                drow[lo..hi].copy_from_slice(&xrow[base..base + (hi - lo)]);
            } else {
                for ox in lo..hi {
                    drow[ox] = xrow[((ox * g.stride) as isize + shift) as usize];
                }
            }
        }
        let _ = c;
    });
}

fn col2im(col: &[f32], c: usize, g: &ConvGeom, dx: &mut [f32]) {
    let hw_out = g.h_out * g.w_out;
    let kk = g.k * g.k;
    // Parallel over channels: each channel owns its dx plane.
    dx.par_chunks_mut(g.h * g.w).enumerate().for_each(|(ch, dxp)| {
        for kyx in 0..kk {
            let row = ch * kk + kyx;
            let ky = kyx / g.k;
            let kx = kyx % g.k;
            let src = &col[row * hw_out..(row + 1) * hw_out];
            let (lo, hi) = valid_range(g.w, g.w_out, kx, g.stride, g.pad, g.dilation);
            let shift = kx as isize * g.dilation as isize - g.pad as isize;
            for oy in 0..g.h_out {
                let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let drow = &mut dxp[iy as usize * g.w..(iy as usize + 1) * g.w];
                let srow = &src[oy * g.w_out..(oy + 1) * g.w_out];
                for ox in lo..hi {
                    let ix = (ox * g.stride) as isize + shift;
                    drow[ix as usize] += srow[ox];
                }
            }
        }
        let _ = c;
    });
}

// ---- batch norm ------------------------------------------------------------

/// Sum and sum-of-squares around `shift`, four f64 lanes.
fn sum_sumsq(plane: &[f32], shift: f64) -> (f64, f64) {
    let mut s = [0.0f64; 4];
    let mut q = [0.0f64; 4];
    let mut chunks = plane.chunks_exact(4);
    for ch in &mut chunks {
        for i in 0..4 {
            let d = ch[i] as f64 - shift;
            s[i] += d;
            q[i] += d * d;
        }
    }
    let (mut ts, mut tq) = (0.0f64, 0.0f64);
    for &xv in chunks.remainder() {
        let d = xv as f64 - shift;
        ts += d;
        tq += d * d;
    }
    ((s[0] + s[1]) + (s[2] + s[3]) + ts, (q[0] + q[1]) + (q[2] + q[3]) + tq)
}

/// Per-channel mean and biased variance over (N, H·W).
pub fn bn_stats(x: &[f32], n: usize, c: usize, hw: usize) -> (Vec<f32>, Vec<f32>) {
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    let count = (n * hw) as f64;
    mean.par_iter_mut().zip(var.par_iter_mut()).enumerate().for_each(|(ch, (m, v))| {
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for b in 0..n {
            let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let (s, q) = sum_sumsq(plane, 0.0);
            sum += s;
            sq += q;
        }
        let mu = sum / count;
        // E[x^2] - mu^2, clamped against cancellation
        *m = mu as f32;
        *v = (sq / count - mu * mu).max(0.0) as f32;
    });
    (mean, var)
}

pub fn bn_fwd(
    x: &[f32],
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
    n: usize,
    c: usize,
    hw: usize,
) -> Vec<f32> {
    let mut y = vec![0.0f32; x.len()];
    y.par_chunks_mut(hw).enumerate().for_each(|(plane, yp)| {
        let ch = plane % c;
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let scale = gamma[ch] * inv;
        let shift = beta[ch] - mean[ch] * scale;
        let xp = &x[plane * hw..(plane + 1) * hw];
        for (yv, &xv) in yp.iter_mut().zip(xp) {
            *yv = xv * scale + shift;
        }
    });
    let _ = n;
    y
}

/// Backward through training-mode batch norm (stats computed from `x`).
pub fn bn_bwd_train(
    x: &[f32],
    gout: &[f32],
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    eps: f32,
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let count = (n * hw) as f32;
    // Two per-channel reductions, then the elementwise combine.
    let stats: Vec<(f32, f32)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            let mut sg = [0.0f64; 4];
            let mut sgx = [0.0f64; 4];
            for b in 0..n {
                let off = (b * c + ch) * hw;
                let gp = &gout[off..off + hw];
                let xp = &x[off..off + hw];
                let mut cg = gp.chunks_exact(4);
                let mut cx = xp.chunks_exact(4);
                for (g4, x4) in (&mut cg).zip(&mut cx) {
                    for i in 0..4 {
                        let g = g4[i] as f64;
                        sg[i] += g;
                        sgx[i] += g * ((x4[i] - mean[ch]) * inv) as f64;
                    }
                }
                for (&g, &xv) in cg.remainder().iter().zip(cx.remainder()) {
                    let g = g as f64;
                    sg[0] += g;
                    sgx[0] += g * ((xv - mean[ch]) * inv) as f64;
                }
            }
            (
                ((sg[0] + sg[1]) + (sg[2] + sg[3])) as f32,
                ((sgx[0] + sgx[1]) + (sgx[2] + sgx[3])) as f32,
            )
        })
        .collect();
    for ch in 0..c {
        dbeta[ch] = stats[ch].0;
        dgamma[ch] = stats[ch].1;
    }
    dx.par_chunks_mut(hw).enumerate().for_each(|(plane, dxp)| {
        let ch = plane % c;
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let (sum_g, sum_gx) = stats[ch];
        let off = plane * hw;
        for (i, dv) in dxp.iter_mut().enumerate() {
            let xhat = (x[off + i] - mean[ch]) * inv;
            *dv = gamma[ch] * inv / count
                * (count * gout[off + i] - sum_g - xhat * sum_gx);
        }
    });
    (dx, dgamma, dbeta)
}

// ---- pooling ---------------------------------------------------------------

/// 2×2 max pool, stride 2, no padding; extents floor-halve. Returns the
/// pooled values and the flat in-plane argmax of each window.
pub fn maxpool2_fwd(x: &[f32], nc: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let ho = h / 2;
    let wo = w / 2;
    let mut y = vec![0.0f32; nc * ho * wo];
    let mut arg = vec![0u32; nc * ho * wo];
    for plane in 0..nc {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        let yp = &mut y[plane * ho * wo..(plane + 1) * ho * wo];
        let ap = &mut arg[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (2 * oy) * w + 2 * ox;
                let cand = [base, base + 1, base + w, base + w + 1];
                let mut best = cand[0];
                for &ci in &cand[1..] {
                    if xp[ci] > xp[best] {
                        best = ci;
                    }
                }
                yp[oy * wo + ox] = xp[best];
                ap[oy * wo + ox] = best as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_bwd(gout: &[f32], arg: &[u32], nc: usize, h: usize, w: usize) -> Vec<f32> {
    let ho = h / 2;
    let wo = w / 2;
    let mut dx = vec![0.0f32; nc * h * w];
    for plane in 0..nc {
        let gp = &gout[plane * ho * wo..(plane + 1) * ho * wo];
        let ap = &arg[plane * ho * wo..(plane + 1) * ho * wo];
        let dxp = &mut dx[plane * h * w..(plane + 1) * h * w];
        for (g, &a) in gp.iter().zip(ap) {
            dxp[a as usize] += g;
        }
    }
    dx
}

fn adaptive_window(i: usize, in_extent: usize, out_extent: usize) -> (usize, usize) {
    let start = i * in_extent / out_extent;
    let end = ((i + 1) * in_extent).div_ceil(out_extent);
    (start, end)
}

pub fn adaptive_avg_fwd(x: &[f32], nc: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; nc * oh * ow];
    y.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, yp)| {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_window(ox, w, ow);
                let mut sum = 0.0f32;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        sum += xp[iy * w + ix];
                    }
                }
                yp[oy * ow + ox] = sum / ((y1 - y0) * (x1 - x0)) as f32;
            }
        }
    });
    y
}

pub fn adaptive_avg_bwd(gout: &[f32], nc: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; nc * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(plane, dxp)| {
        let gp = &gout[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1) = adaptive_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_window(ox, w, ow);
                let g = gp[oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        dxp[iy * w + ix] += g;
                    }
                }
            }
        }
    });
    dx
}

// ---- bilinear resize -------------------------------------------------------

/// Source coordinate and lerp weight for align_corners=false sampling:
/// `src = (dst + 0.5) * (in/out) - 0.5`, clamped to the valid range.
fn bilinear_axis(out: usize, inn: usize) -> Vec<(usize, usize, f32)> {
    let scale = inn as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            if src <= 0.0 {
                (0, 0, 0.0)
            } else {
                let i0 = src.floor() as usize;
                if i0 >= inn - 1 {
                    (inn - 1, inn - 1, 0.0)
                } else {
                    (i0, i0 + 1, (src - i0 as f64) as f32)
                }
            }
        })
        .collect()
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

pub fn bilinear_fwd(x: &[f32], nc: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if oh == h && ow == w {
        return x.to_vec();
    }
    let ys = bilinear_axis(oh, h);
    let xs = bilinear_axis(ow, w);
    let mut y = vec![0.0f32; nc * oh * ow];
    y.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, yp)| {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            let r0 = &xp[y0 * w..y0 * w + w];
            let r1 = &xp[y1 * w..y1 * w + w];
            let orow = &mut yp[oy * ow..(oy + 1) * ow];
            for (ov, &(x0, x1, tx)) in orow.iter_mut().zip(&xs) {
                let top = lerp(r0[x0], r0[x1], tx);
                let bot = lerp(r1[x0], r1[x1], tx);
                *ov = lerp(top, bot, ty);
            }
        }
    });
    y
}

pub fn bilinear_bwd(gout: &[f32], nc: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if oh == h && ow == w {
        return gout.to_vec();
    }
    let ys = bilinear_axis(oh, h);
    let xs = bilinear_axis(ow, w);
    let mut dx = vec![0.0f32; nc * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(plane, dxp)| {
        let gp = &gout[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let g = gp[oy * ow + ox];
                dxp[y0 * w + x0] += g * (1.0 - tx) * (1.0 - ty);
                dxp[y0 * w + x1] += g * tx * (1.0 - ty);
                dxp[y1 * w + x0] += g * (1.0 - tx) * ty;
                dxp[y1 * w + x1] += g * tx * ty;
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        gemm(2, 2, 2, &a, &b, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        let mut ct = [0.0f32; 4];
        // B stored transposed: rows of bt are columns of b
        let bt = [5.0, 7.0, 6.0, 8.0];
        gemm_nt(2, 2, 2, &a, &bt, &mut ct, false);
        assert_eq!(c, ct);
    }

    #[test]
    fn conv_identity_kernel() {
        // 3×3 kernel with center 1 and pad 1 reproduces the input
        let g = ConvGeom {
            n: 1, c_in: 1, h: 4, w: 4, c_out: 1, k: 3,
            stride: 1, pad: 1, dilation: 1, groups: 1, h_out: 4, w_out: 4,
        };
        let x: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let mut w = vec![0.0f32; 9];
        w[4] = 1.0;
        let y = conv2d_fwd(&x, &w, &g);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_dilated_ones_center() {
        // 5×5 ones, 3×3 ones kernel, dilation 2, pad 2: center output taps
        // the 9 corners/midpoints of the full 5×5 grid → 9.
        let g = ConvGeom {
            n: 1, c_in: 1, h: 5, w: 5, c_out: 1, k: 3,
            stride: 1, pad: 2, dilation: 2, groups: 1, h_out: 5, w_out: 5,
        };
        let x = vec![1.0f32; 25];
        let w = vec![1.0f32; 9];
        let y = conv2d_fwd(&x, &w, &g);
        assert_eq!(y[12], 9.0);
        // corner output only sees the 2×2 aligned taps
        assert_eq!(y[0], 4.0);
    }

    #[test]
    fn depthwise_matches_grouped_path() {
        // groups=C depthwise fast path equals per-channel independent convs
        use rand::Rng;
        let mut rng = crate::testrng(7);
        let (c, h, w_) = (4usize, 6usize, 6usize);
        let x: Vec<f32> = (0..c * h * w_).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        let wk: Vec<f32> = (0..c * 9).map(|_| rng.random_range(-1.0..1.0f32)).collect();
        let g = ConvGeom {
            n: 1, c_in: c, h, w: w_, c_out: c, k: 3,
            stride: 1, pad: 1, dilation: 1, groups: c, h_out: h, w_out: w_,
        };
        let fast = conv2d_fwd(&x, &wk, &g);
        // brute force: one 1-channel conv per channel
        for ch in 0..c {
            let g1 = ConvGeom { c_in: 1, c_out: 1, groups: 1, ..g };
            let y1 = conv2d_fwd(&x[ch * h * w_..(ch + 1) * h * w_], &wk[ch * 9..ch * 9 + 9], &g1);
            for i in 0..h * w_ {
                assert!((y1[i] - fast[ch * h * w_ + i]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn maxpool_picks_max() {
        let (y, _) = maxpool2_fwd(&[1.0, 2.0, 3.0, 4.0], 1, 2, 2);
        assert_eq!(y, vec![4.0]);
        // odd extents floor
        let x: Vec<f32> = (0..25).map(|v| v as f32).collect();
        let (y, _) = maxpool2_fwd(&x, 1, 5, 5);
        assert_eq!(y.len(), 4);
        assert_eq!(y[0], 6.0);
    }

    #[test]
    fn bilinear_constant_exact() {
        let x = vec![0.3f32; 16];
        let y = bilinear_fwd(&x, 1, 4, 4, 8, 8);
        assert!(y.iter().all(|&v| v == 0.3));
        let d = bilinear_fwd(&x, 1, 4, 4, 2, 2);
        assert!(d.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn bilinear_identity_bit_exact() {
        let x: Vec<f32> = (0..16).map(|v| v as f32 * 0.37).collect();
        let y = bilinear_fwd(&x, 1, 4, 4, 4, 4);
        assert_eq!(x, y);
    }

    #[test]
    fn adaptive_bins_cover_input() {
        // 6-bin windows over 16 columns partition it
        let mut covered = vec![0usize; 16];
        for i in 0..6 {
            let (a, b) = adaptive_window(i, 16, 6);
            for c in covered.iter_mut().take(b).skip(a) {
                *c += 1;
            }
        }
        assert!(covered.iter().all(|&c| c >= 1));
    }
}
