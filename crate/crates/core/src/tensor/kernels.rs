//! Numeric kernels shared by forward and backward passes.

use crate::error::{Error, Result};

/// `c = op(a) * op(b) (+ c if accumulate)` for row-major matrices, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`. A transposed operand is stored
/// in its untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the length assertions above guarantee every strided access
    // stays inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over an `(N, C, H, W)` input.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || wt.len() != 4 || x[1] != wt[1] || stride == 0 {
            return Err(Error::shape("conv2d", x, wt));
        }
        let (h, w, kh, kw) = (x[2], x[3], wt[2], wt[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", x, wt));
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            h,
            w,
            out_c: wt[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `ow` whose input column `ow * stride + k - pad` lies in
/// `[0, w)`.
fn valid_cols(d: &ConvDims, k: usize) -> (usize, usize) {
    let lo = d.pad.saturating_sub(k).div_ceil(d.stride).min(d.ow);
    let hi = if d.w + d.pad > k {
        ((d.w + d.pad - k - 1) / d.stride + 1).min(d.ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds one `(C, H, W)` image into a `(C*kh*kw, oh*ow)` patch matrix.
pub(crate) fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let plane = d.oh * d.ow;
    let mut row = 0;
    for c in 0..d.c {
        let img = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let (lo, hi) = valid_cols(d, kj);
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oh in 0..d.oh {
                    let ih = (oh * d.stride + ki) as isize - d.pad as isize;
                    let out_row = &mut dst[oh * d.ow..(oh + 1) * d.ow];
                    if ih < 0 || ih >= d.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &img[ih as usize * d.w..(ih as usize + 1) * d.w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    let first = lo * d.stride + kj - d.pad;
                    if d.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, s) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(d.stride)) {
                            *o = *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto the image.
pub(crate) fn col2im(cols: &[f64], d: &ConvDims, x: &mut [f64]) {
    let plane = d.oh * d.ow;
    let mut row = 0;
    for c in 0..d.c {
        let img = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let (lo, hi) = valid_cols(d, kj);
                let src = &cols[row * plane..(row + 1) * plane];
                for oh in 0..d.oh {
                    let ih = (oh * d.stride + ki) as isize - d.pad as isize;
                    if ih < 0 || ih >= d.h as isize || lo == hi {
                        continue;
                    }
                    let dst = &mut img[ih as usize * d.w..(ih as usize + 1) * d.w];
                    let first = lo * d.stride + kj - d.pad;
                    let s = &src[oh * d.ow + lo..oh * d.ow + hi];
                    if d.stride == 1 {
                        for (o, v) in dst[first..first + hi - lo].iter_mut().zip(s) {
                            *o += v;
                        }
                    } else {
                        for (o, v) in dst[first..].iter_mut().step_by(d.stride).zip(s) {
                            *o += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Splits a shape at `axis` into `(outer, axis_len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape`, the flat index of the source element it
/// is broadcast from.
pub(crate) fn broadcast_source_index(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let offset = out_shape.len() - src.len();
    let src_strides = strides(src);
    // stride 0 along broadcast axes
    let eff: Vec<usize> = (0..out_shape.len())
        .map(|i| {
            if i < offset || src[i - offset] == 1 {
                0
            } else {
                src_strides[i - offset]
            }
        })
        .collect();
    let mut idx = vec![0usize; out_shape.len()];
    let mut out = Vec::with_capacity(n);
    let mut cur = 0usize;
    for _ in 0..n {
        out.push(cur);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            cur += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Source flat index for each element of the permuted tensor.
pub(crate) fn permute_source_index(src: &[usize], axes: &[usize]) -> Vec<usize> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
    let src_strides = strides(src);
    let eff: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n: usize = src.iter().product();
    let mut idx = vec![0usize; out_shape.len()];
    let mut out = Vec::with_capacity(n);
    let mut cur = 0usize;
    for _ in 0..n {
        out.push(cur);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            cur += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
