//! Forward and backward numeric kernels on raw row-major buffers.
//!
//! Accumulation order is fixed: every dot product sums its terms in
//! ascending inner index starting from `0.0`, so results are bit-identical
//! to a plain scalar loop over the same index order.

use crate::error::{Error, Result};

const K_BLOCK: usize = 256;
const N_BLOCK: usize = 256;
const MR: usize = 4;
const NR: usize = 8;

/// `out[m×n] += a[m×k] · b[k×n]`.
///
/// Register-tiled over `MR×NR` output blocks and blocked over `k`; for any
/// output entry the `k` terms are still added one at a time in ascending
/// order onto the entry's previous value.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    gemm(false, false, a, b, m, k, n, out);
}

/// `out[m×n] += aᵀ · b` for `a: k×m`, `b: k×n`, same summation order.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    gemm(true, false, a, b, m, k, n, out);
}

/// `out[m×n] += a · bᵀ` for `a: m×k`, `b: n×k`, same summation order.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    gemm(false, true, a, b, m, k, n, out);
}

/// Dispatches on operand layouts. Narrow outputs are computed transposed,
/// `outᵀ = op(b)ᵀ·op(a)ᵀ`, so the long side runs along the register tile;
/// per-entry summation order is unaffected.
#[allow(clippy::too_many_arguments)]
fn gemm(ta: bool, tb: bool, a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    if n < NR && m >= NR {
        let mut tmp = transpose(out, m, n);
        gemm(!tb, !ta, b, a, n, k, m, &mut tmp);
        out.copy_from_slice(&transpose(&tmp, n, m));
        return;
    }
    if m <= MR {
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|i| (0..k).map(|kk| if ta { a[kk * m + i] } else { a[i * k + kk] }).collect())
            .collect();
        if tb {
            gemm_short_dot(&rows, b, k, n, out);
        } else {
            gemm_short_axpy(&rows, b, k, n, out);
        }
        return;
    }
    match (ta, tb) {
        (false, false) => gemm_tiled::<false, false>(a, b, m, k, n, out),
        (true, false) => gemm_tiled::<true, false>(a, b, m, k, n, out),
        (false, true) => gemm_tiled::<false, true>(a, b, m, k, n, out),
        (true, true) => gemm_tiled::<true, true>(a, b, m, k, n, out),
    }
}

fn gemm_tiled<const TA: bool, const TB: bool>(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let mut bp = vec![0.0; K_BLOCK * N_BLOCK.next_multiple_of(NR)];
    let mut ap = vec![0.0; K_BLOCK * MR];
    for j0 in (0..n).step_by(N_BLOCK) {
        let j1 = (j0 + N_BLOCK).min(n);
        let tiles = (j1 - j0).div_ceil(NR);
        for k0 in (0..k).step_by(K_BLOCK) {
            let k1 = (k0 + K_BLOCK).min(k);
            let kc = k1 - k0;
            // Packed B: per column tile, kc rows of NR values, zero padded.
            for jt in 0..tiles {
                let panel = &mut bp[jt * kc * NR..(jt + 1) * kc * NR];
                let jb = j0 + jt * NR;
                let nr = NR.min(j1 - jb);
                if TB {
                    panel.fill(0.0);
                    for c in 0..nr {
                        let src = &b[(jb + c) * k + k0..(jb + c) * k + k1];
                        for (t, &v) in src.iter().enumerate() {
                            panel[t * NR + c] = v;
                        }
                    }
                } else {
                    for (t, row) in panel.chunks_exact_mut(NR).enumerate() {
                        let src = (k0 + t) * n + jb;
                        row[..nr].copy_from_slice(&b[src..src + nr]);
                        row[nr..].fill(0.0);
                    }
                }
            }
            for i0 in (0..m).step_by(MR) {
                let mr = MR.min(m - i0);
                // Packed A: kc columns of MR values, zero padded.
                if TA {
                    for (t, col) in ap[..kc * MR].chunks_exact_mut(MR).enumerate() {
                        let src = (k0 + t) * m + i0;
                        col[..mr].copy_from_slice(&a[src..src + mr]);
                        col[mr..].fill(0.0);
                    }
                } else {
                    ap[..kc * MR].fill(0.0);
                    for r in 0..mr {
                        let src = &a[(i0 + r) * k + k0..(i0 + r) * k + k1];
                        for (t, &v) in src.iter().enumerate() {
                            ap[t * MR + r] = v;
                        }
                    }
                }
                for jt in 0..tiles {
                    let jb = j0 + jt * NR;
                    let nr = NR.min(j1 - jb);
                    let mut acc = [[0.0; NR]; MR];
                    for r in 0..mr {
                        acc[r][..nr].copy_from_slice(&out[(i0 + r) * n + jb..(i0 + r) * n + jb + nr]);
                    }
                    micro_kernel(&ap[..kc * MR], &bp[jt * kc * NR..(jt + 1) * kc * NR], &mut acc);
                    for r in 0..mr {
                        out[(i0 + r) * n + jb..(i0 + r) * n + jb + nr].copy_from_slice(&acc[r][..nr]);
                    }
                }
            }
        }
    }
}

/// Few output rows, `b` row-major `k×n`: stream `b` once, updating each
/// output row with one scaled `b` row per `k` step.
fn gemm_short_axpy(rows: &[Vec<f64>], b: &[f64], k: usize, n: usize, out: &mut [f64]) {
    const CHUNK: usize = 512;
    for j0 in (0..n).step_by(CHUNK) {
        let j1 = (j0 + CHUNK).min(n);
        for kk in 0..k {
            let brow = &b[kk * n + j0..kk * n + j1];
            for (r, row) in rows.iter().enumerate() {
                let av = row[kk];
                let orow = &mut out[r * n + j0..r * n + j1];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Few output rows, `b` stored as `n×k`: one running sum per output entry
/// over contiguous `k`, two columns at a time.
fn gemm_short_dot(rows: &[Vec<f64>], b: &[f64], k: usize, n: usize, out: &mut [f64]) {
    let m = rows.len();
    let mut j = 0;
    while j + 2 <= n {
        let (b0, b1) = (&b[j * k..(j + 1) * k], &b[(j + 1) * k..(j + 2) * k]);
        let mut acc = [[0.0; 2]; MR];
        for r in 0..m {
            acc[r] = [out[r * n + j], out[r * n + j + 1]];
        }
        for kk in 0..k {
            let (x0, x1) = (b0[kk], b1[kk]);
            for r in 0..m {
                let av = rows[r][kk];
                acc[r][0] += av * x0;
                acc[r][1] += av * x1;
            }
        }
        for r in 0..m {
            out[r * n + j] = acc[r][0];
            out[r * n + j + 1] = acc[r][1];
        }
        j += 2;
    }
    if j < n {
        let bj = &b[j * k..(j + 1) * k];
        for (r, row) in rows.iter().enumerate() {
            let mut acc = out[r * n + j];
            for (av, bv) in row.iter().zip(bj) {
                acc += av * bv;
            }
            out[r * n + j] = acc;
        }
    }
}

#[inline(always)]
fn micro_kernel(ap: &[f64], bp: &[f64], acc: &mut [[f64; NR]; MR]) {
    for (av, bv) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)) {
        for r in 0..MR {
            for c in 0..NR {
                acc[r][c] += av[r] * bv[c];
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    const B: usize = 32;
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    out[j * rows + i] = a[i * cols + j];
                }
            }
        }
    }
    out
}

/// Row-wise softmax with max subtraction; `x` is `rows × n`.
pub fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Geometry of a 2-D convolution over a `C×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output size must be integral: `(H + 2·pad − k)` divisible by `stride`.
    pub fn new(
        (c_in, h, w): (usize, usize, usize),
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(Error::Config(format!(
                "conv2d kernel and stride must be positive (k={k}, stride={stride})"
            )));
        }
        let out = |len: usize, axis: &str| -> Result<usize> {
            let span = len + 2 * pad;
            if span < k || !(span - k).is_multiple_of(stride) {
                return Err(Error::Config(format!(
                    "conv2d output {axis} not integral: ({len} + 2·{pad} − {k}) / {stride}"
                )));
            }
            Ok((span - k) / stride + 1)
        };
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            out_h: out(h, "height")?,
            out_w: out(w, "width")?,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds input patches into a `(C·k·k) × (H'·W')` matrix; padded taps are zero.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_pixels();
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back into `grad_x`.
pub fn col2im_acc(cols: &[f64], g: &ConvGeom, grad_x: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut grad_x[(c * g.h + iy as usize) * g.w..];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation: `out[o,y,x] = Σ_{c,ky,kx} w[o,c,ky,kx]·x[c, y·s+ky−p, x·s+kx−p] + b[o]`,
/// with the bias added after the weighted sum.
pub fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_pixels();
    let mut out = vec![0.0; g.c_out * p];
    if g.is_pointwise() {
        matmul_acc(w, x, g.c_out, g.patch_len(), p, &mut out);
    } else {
        let cols = im2col(x, g);
        matmul_acc(w, &cols, g.c_out, g.patch_len(), p, &mut out);
    }
    for (row, &bias) in out.chunks_exact_mut(p).zip(b) {
        for v in row {
            *v += bias;
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)` for upstream gradient `go` of shape `C_out×H'×W'`.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    go: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = g.out_pixels();
    let kk = g.patch_len();
    let grad_b: Vec<f64> = go.chunks_exact(p).map(|r| r.iter().sum()).collect();
    let mut grad_cols = vec![0.0; kk * p];
    matmul_tn_acc(w, go, kk, g.c_out, p, &mut grad_cols);
    let mut grad_w = vec![0.0; g.c_out * kk];
    let grad_x = if g.is_pointwise() {
        matmul_nt_acc(go, x, g.c_out, p, kk, &mut grad_w);
        grad_cols
    } else {
        matmul_nt_acc(go, &im2col(x, g), g.c_out, p, kk, &mut grad_w);
        let mut gx = vec![0.0; g.c_in * g.h * g.w];
        col2im_acc(&grad_cols, g, &mut gx);
        gx
    };
    (grad_x, grad_w, grad_b)
}

/// Per-axis sampling table for half-pixel bilinear interpolation:
/// `(lo, hi, frac)` per output coordinate.
fn resize_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear resize of a `C×H×W` buffer, half-pixel centres (align-corners off).
/// Same-size resizes return an exact copy.
pub fn bilinear_resize(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if h == oh && w == ow {
        return x.to_vec();
    }
    let ys = resize_axis(h, oh);
    let xs = resize_axis(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let v00 = plane[y0 * w + x0];
                let v01 = plane[y0 * w + x1];
                let v10 = plane[y1 * w + x0];
                let v11 = plane[y1 * w + x1];
                let top = v00 + (v01 - v00) * lx;
                let bottom = v10 + (v11 - v10) * lx;
                out[(ch * oh + oy) * ow + ox] = top + (bottom - top) * ly;
            }
        }
    }
    out
}

pub fn bilinear_resize_backward(
    go: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    if h == oh && w == ow {
        return go.to_vec();
    }
    let ys = resize_axis(h, oh);
    let xs = resize_axis(w, ow);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let g = go[(ch * oh + oy) * ow + ox];
                plane[y0 * w + x0] += g * (1.0 - lx) * (1.0 - ly);
                plane[y0 * w + x1] += g * lx * (1.0 - ly);
                plane[y1 * w + x0] += g * (1.0 - lx) * ly;
                plane[y1 * w + x1] += g * lx * ly;
            }
        }
    }
    gx
}

/// Nearest-neighbour resize with half-pixel centres; keeps binary masks binary.
pub fn nearest_resize(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let src = |o: usize, in_len: usize, out_len: usize| {
        (((o as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
    };
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let iy = src(oy, h, oh);
            for ox in 0..ow {
                let ix = src(ox, w, ow);
                out[(ch * oh + oy) * ow + ox] = x[(ch * h + iy) * w + ix];
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
