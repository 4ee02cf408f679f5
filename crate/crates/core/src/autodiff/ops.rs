//! Forward and backward numeric kernels shared by the tape ops and the
//! no-tape inference path.
//!
//! Convolution uses im2col plus an f64 GEMM, tiled over output rows so the
//! column buffer stays bounded regardless of image size. The backward pass
//! recomputes the column buffer instead of storing it.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Upper bound on the im2col scratch buffer, in f64 elements (8 MiB).
/// Sized to stay cache-resident: wider tiles measured slower on large
/// inference images despite better GEMM amortization.
const COLS_TILE_ELEMS: usize = 1 << 20;

// ---------------------------------------------------------------------------
// GEMM wrappers
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] * B[k,n] + beta * C.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    let a = ArrayView2::from_shape((m, k), a).expect("gemm: lhs shape");
    let b = ArrayView2::from_shape((k, n), b).expect("gemm: rhs shape");
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm: out shape");
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

/// C[m,n] = A[m,k] * B[n,k]^T + beta * C.
pub(crate) fn gemm_nt(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    let a = ArrayView2::from_shape((m, k), a).expect("gemm_nt: lhs shape");
    let b = ArrayView2::from_shape((n, k), b).expect("gemm_nt: rhs shape");
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm_nt: out shape");
    general_mat_mul(1.0, &a, &b.t(), beta, &mut c);
}

/// C[m,n] = A[k,m]^T * B[k,n] + beta * C.
pub(crate) fn gemm_tn(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    let a = ArrayView2::from_shape((k, m), a).expect("gemm_tn: lhs shape");
    let b = ArrayView2::from_shape((k, n), b).expect("gemm_tn: rhs shape");
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm_tn: out shape");
    general_mat_mul(1.0, &a.t(), &b, beta, &mut c);
}

/// out[dim,dim] = X^T X for row-major X[n,dim].
pub(crate) fn gram_matrix(x: &[f64], n: usize, dim: usize, out: &mut [f64]) {
    gemm_tn(dim, n, dim, x, x, 0.0, out);
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Geometry of one conv2d application.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvDims {
    pub(crate) fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let h_out = (h + 2 * padding - k) / stride + 1;
        let w_out = (w + 2 * padding - k) / stride + 1;
        ConvDims {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            h_out,
            w_out,
        }
    }

    fn rows_per_tile(&self) -> usize {
        let ckk = self.c_in * self.k * self.k;
        (COLS_TILE_ELEMS / (ckk * self.w_out).max(1)).clamp(1, self.h_out.max(1))
    }
}

/// Fills `cols[ckk, rows*w_out]` with patches for output rows
/// `tile_start..tile_start+rows`. Out-of-bounds taps (zero padding) are 0.
fn im2col_tile(input: &[f64], d: &ConvDims, tile_start: usize, rows: usize, cols: &mut [f64]) {
    let seg = rows * d.w_out;
    let pad = d.padding as isize;
    for ci in 0..d.c_in {
        let chan = &input[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row_idx = (ci * d.k + ky) * d.k + kx;
                let dst_row = &mut cols[row_idx * seg..(row_idx + 1) * seg];
                for r in 0..rows {
                    let oy = tile_start + r;
                    let iy = (oy * d.stride + ky) as isize - pad;
                    let dst = &mut dst_row[r * d.w_out..(r + 1) * d.w_out];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &chan[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if d.stride == 1 {
                        let off = kx as isize - pad;
                        // Valid output columns: 0 <= ox + off < w.
                        let lo = (-off).max(0) as usize;
                        let hi = ((d.w as isize - off).max(0) as usize).min(d.w_out);
                        dst[..lo.min(d.w_out)].fill(0.0);
                        if lo < hi {
                            let s = (lo as isize + off) as usize;
                            dst[lo..hi].copy_from_slice(&src_row[s..s + (hi - lo)]);
                        }
                        dst[hi.max(lo.min(d.w_out))..].fill(0.0);
                    } else {
                        for (ox, out) in dst.iter_mut().enumerate() {
                            let ix = (ox * d.stride + kx) as isize - pad;
                            *out = if ix < 0 || ix >= d.w as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back onto the input gradient; inverse of `im2col_tile`.
fn col2im_tile_add(cols: &[f64], d: &ConvDims, tile_start: usize, rows: usize, grad_in: &mut [f64]) {
    let seg = rows * d.w_out;
    let pad = d.padding as isize;
    for ci in 0..d.c_in {
        let chan = &mut grad_in[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row_idx = (ci * d.k + ky) * d.k + kx;
                let src_row = &cols[row_idx * seg..(row_idx + 1) * seg];
                for r in 0..rows {
                    let oy = tile_start + r;
                    let iy = (oy * d.stride + ky) as isize - pad;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut chan[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let src = &src_row[r * d.w_out..(r + 1) * d.w_out];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - pad;
                        if ix >= 0 && ix < d.w as isize {
                            dst_row[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// out[c_out, h_out, w_out] = weights * im2col(input) + bias.
pub(crate) fn conv2d_forward(input: &[f64], weights: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let ckk = d.c_in * d.k * d.k;
    let out_hw = d.h_out * d.w_out;
    let mut out = vec![0.0; d.c_out * out_hw];
    let tile_rows = d.rows_per_tile();
    let mut cols = vec![0.0; ckk * tile_rows * d.w_out];
    let mut tile_out = vec![0.0; d.c_out * tile_rows * d.w_out];
    let mut tile_start = 0;
    while tile_start < d.h_out {
        let rows = tile_rows.min(d.h_out - tile_start);
        let seg = rows * d.w_out;
        im2col_tile(input, d, tile_start, rows, &mut cols[..ckk * seg]);
        gemm(
            d.c_out,
            ckk,
            seg,
            weights,
            &cols[..ckk * seg],
            0.0,
            &mut tile_out[..d.c_out * seg],
        );
        for co in 0..d.c_out {
            let b = bias[co];
            let dst = &mut out[co * out_hw + tile_start * d.w_out..][..seg];
            let src = &tile_out[co * seg..(co + 1) * seg];
            for (o, &s) in dst.iter_mut().zip(src) {
                *o = s + b;
            }
        }
        tile_start += rows;
    }
    out
}

/// Gradients of conv2d with respect to input, weights, and bias.
pub(crate) fn conv2d_backward(
    input: &[f64],
    weights: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ckk = d.c_in * d.k * d.k;
    let out_hw = d.h_out * d.w_out;
    let mut grad_in = vec![0.0; d.c_in * d.h * d.w];
    let mut grad_w = vec![0.0; d.c_out * ckk];
    let mut grad_b = vec![0.0; d.c_out];

    for co in 0..d.c_out {
        grad_b[co] = grad_out[co * out_hw..(co + 1) * out_hw].iter().sum();
    }

    let tile_rows = d.rows_per_tile();
    let mut cols = vec![0.0; ckk * tile_rows * d.w_out];
    let mut g_tile = vec![0.0; d.c_out * tile_rows * d.w_out];
    let mut d_cols = vec![0.0; ckk * tile_rows * d.w_out];
    let mut tile_start = 0;
    while tile_start < d.h_out {
        let rows = tile_rows.min(d.h_out - tile_start);
        let seg = rows * d.w_out;
        im2col_tile(input, d, tile_start, rows, &mut cols[..ckk * seg]);
        for co in 0..d.c_out {
            g_tile[co * seg..(co + 1) * seg]
                .copy_from_slice(&grad_out[co * out_hw + tile_start * d.w_out..][..seg]);
        }
        // dW += g_tile * cols^T; dCols = W^T * g_tile.
        gemm_nt(
            d.c_out,
            seg,
            ckk,
            &g_tile[..d.c_out * seg],
            &cols[..ckk * seg],
            1.0,
            &mut grad_w,
        );
        gemm_tn(
            ckk,
            d.c_out,
            seg,
            weights,
            &g_tile[..d.c_out * seg],
            0.0,
            &mut d_cols[..ckk * seg],
        );
        col2im_tile_add(&d_cols[..ckk * seg], d, tile_start, rows, &mut grad_in);
        tile_start += rows;
    }
    (grad_in, grad_w, grad_b)
}

// ---------------------------------------------------------------------------
// Pointwise and reduction kernels
// ---------------------------------------------------------------------------

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn sigmoid_forward(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| sigmoid_scalar(x)).collect()
}

pub(crate) fn relu_forward(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| x.max(0.0)).collect()
}

/// Softmax along `axis` of a row-major array with the given shape.
pub(crate) fn softmax_forward(xs: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; xs.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane * inner + i;
            let mut max = f64::NEG_INFINITY;
            for l in 0..lane {
                max = max.max(xs[base + l * inner]);
            }
            let mut sum = 0.0;
            for l in 0..lane {
                let e = (xs[base + l * inner] - max).exp();
                out[base + l * inner] = e;
                sum += e;
            }
            for l in 0..lane {
                out[base + l * inner] /= sum;
            }
        }
    }
    out
}

/// Mean over the spatial plane of each channel: [C,H,W] -> [C].
pub(crate) fn gap_forward(xs: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..c)
        .map(|ci| xs[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}

/// y[o] = sum_i w[o,i] x[i] + b[o].
pub(crate) fn affine_forward(w: &[f64], b: &[f64], x: &[f64], out_dim: usize, in_dim: usize) -> Vec<f64> {
    (0..out_dim)
        .map(|o| {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            b[o] + row.iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>()
        })
        .collect()
}

/// Interpolation table for doubling one axis with half-pixel-center
/// alignment: out[o] = (1-t)*in[i0] + t*in[i1].
pub(crate) fn bilinear_table(n_in: usize) -> Vec<(usize, usize, f64)> {
    let n_out = n_in * 2;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let f = src.floor();
            let t = src - f;
            let i0 = f.max(0.0) as usize;
            let i0 = i0.min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            if f < 0.0 {
                (i0, i0, 0.0)
            } else {
                (i0, i1, t)
            }
        })
        .collect()
}

/// Bilinear x2 upsample of every channel: [C,H,W] -> [C,2H,2W].
pub(crate) fn upsample2_forward(xs: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let rows = bilinear_table(h);
    let cols = bilinear_table(w);
    let (h2, w2) = (h * 2, w * 2);
    let mut out = vec![0.0; c * h2 * w2];
    let mut tmp = vec![0.0; h2 * w];
    for ci in 0..c {
        let chan = &xs[ci * h * w..(ci + 1) * h * w];
        for (oy, &(i0, i1, t)) in rows.iter().enumerate() {
            let r0 = &chan[i0 * w..(i0 + 1) * w];
            let r1 = &chan[i1 * w..(i1 + 1) * w];
            let dst = &mut tmp[oy * w..(oy + 1) * w];
            for x in 0..w {
                dst[x] = (1.0 - t) * r0[x] + t * r1[x];
            }
        }
        let out_chan = &mut out[ci * h2 * w2..(ci + 1) * h2 * w2];
        for oy in 0..h2 {
            let src = &tmp[oy * w..(oy + 1) * w];
            let dst = &mut out_chan[oy * w2..(oy + 1) * w2];
            for (ox, &(i0, i1, t)) in cols.iter().enumerate() {
                dst[ox] = (1.0 - t) * src[i0] + t * src[i1];
            }
        }
    }
    out
}

/// Scatter-add transpose of `upsample2_forward`.
pub(crate) fn upsample2_backward(grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let rows = bilinear_table(h);
    let cols = bilinear_table(w);
    let (h2, w2) = (h * 2, w * 2);
    let mut out = vec![0.0; c * h * w];
    let mut tmp = vec![0.0; h2 * w];
    for ci in 0..c {
        tmp.fill(0.0);
        let g_chan = &grad[ci * h2 * w2..(ci + 1) * h2 * w2];
        for oy in 0..h2 {
            let src = &g_chan[oy * w2..(oy + 1) * w2];
            let dst = &mut tmp[oy * w..(oy + 1) * w];
            for (ox, &(i0, i1, t)) in cols.iter().enumerate() {
                dst[i0] += (1.0 - t) * src[ox];
                dst[i1] += t * src[ox];
            }
        }
        let out_chan = &mut out[ci * h * w..(ci + 1) * h * w];
        for (oy, &(i0, i1, t)) in rows.iter().enumerate() {
            let src = &tmp[oy * w..(oy + 1) * w];
            for x in 0..w {
                out_chan[i0 * w + x] += (1.0 - t) * src[x];
                out_chan[i1 * w + x] += t * src[x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_hand_product() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn tiled_conv_matches_naive_small() {
        // 1x4x5 input, 2x1x3x3 weights, stride 1, padding 1.
        let input: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let weights: Vec<f64> = (0..18).map(|i| (i as f64 - 9.0) * 0.05).collect();
        let bias = [0.3, -0.2];
        let d = ConvDims::new(1, 4, 5, 2, 3, 1, 1);
        let got = conv2d_forward(&input, &weights, &bias, &d);
        let mut want = vec![0.0; 2 * 4 * 5];
        for co in 0..2 {
            for oy in 0..4i64 {
                for ox in 0..5i64 {
                    let mut acc = bias[co];
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let iy = oy + ky - 1;
                            let ix = ox + kx - 1;
                            if iy >= 0 && iy < 4 && ix >= 0 && ix < 5 {
                                acc += weights[((co * 1 + 0) * 3 + ky as usize) * 3 + kx as usize]
                                    * input[iy as usize * 5 + ix as usize];
                            }
                        }
                    }
                    want[(co * 4 + oy as usize) * 5 + ox as usize] = acc;
                }
            }
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "conv mismatch: {g} vs {w}");
        }
    }

    #[test]
    fn strided_conv_output_dims() {
        let d = ConvDims::new(1, 8, 8, 1, 3, 2, 1);
        assert_eq!((d.h_out, d.w_out), (4, 4));
    }

    #[test]
    fn upsample2_round_trip_adjoint() {
        // <Up(x), g> == <x, Up^T(g)> for random-ish fixed vectors.
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let up = upsample2_forward(&x, 1, 3, 4);
        let g: Vec<f64> = (0..48).map(|i| (i as f64 * 0.3).cos()).collect();
        let down = upsample2_backward(&g, 1, 3, 4);
        let lhs: f64 = up.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&down).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "adjoint mismatch: {lhs} vs {rhs}");
    }
}
