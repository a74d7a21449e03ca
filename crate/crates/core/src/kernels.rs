//! Raw compute kernels behind the tape ops.
//!
//! Convolution goes through im2col + GEMM. Every kernel keeps a fixed
//! per-output-element summation order, so results are bit-identical no
//! matter how many threads rayon hands out: parallelism only ever splits
//! work across independent output rows.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Below this many multiply-adds a kernel stays single-threaded.
const PAR_FLOP_THRESHOLD: usize = 1 << 20;

/// Geometry of a (possibly dilated) 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    /// Kernel extent (height, width).
    pub kernel: (usize, usize),
    pub stride: usize,
    /// Zero padding (low, high) along height.
    pub pad_h: (usize, usize),
    /// Zero padding (low, high) along width.
    pub pad_w: (usize, usize),
    pub dilation: usize,
}

impl ConvSpec {
    /// Symmetric padding on both axes.
    pub fn new(kernel: (usize, usize), stride: usize, pad: usize, dilation: usize) -> Self {
        ConvSpec {
            kernel,
            stride,
            pad_h: (pad, pad),
            pad_w: (pad, pad),
            dilation,
        }
    }

    /// 3x3 stride-1 convolution with pad = dilation, which preserves the
    /// spatial size for any dilation rate.
    pub fn same3x3(dilation: usize) -> Self {
        ConvSpec::new((3, 3), 1, dilation, dilation)
    }

    pub fn point(stride: usize) -> Self {
        ConvSpec::new((1, 1), stride, 0, 1)
    }

    fn out_extent(&self, input: usize, pad: (usize, usize), k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = input + pad.0 + pad.1;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    /// Output spatial extents; `out = floor((in + pad_lo + pad_hi -
    /// dilation*(k-1) - 1) / stride) + 1` must be >= 1 on both axes.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || self.dilation == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::Config(format!("degenerate conv spec {self:?}")));
        }
        let oh = self.out_extent(h, self.pad_h, self.kernel.0);
        let ow = self.out_extent(w, self.pad_w, self.kernel.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
            _ => Err(Error::Shape(format!(
                "conv spec {self:?} yields non-positive output for {h}x{w} input"
            ))),
        }
    }
}

/// Max-pool geometry (square window, symmetric padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolSpec {
    pub fn new(window: usize, stride: usize, pad: usize) -> Self {
        PoolSpec { window, stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Config(format!("degenerate pool spec {self:?}")));
        }
        // pad >= window would let a window sit entirely inside padding,
        // where a -inf-padded maximum is undefined.
        if self.pad * 2 >= self.window {
            return Err(Error::Config(format!(
                "pool padding {} too large for window {}",
                self.pad, self.window
            )));
        }
        if self.window > h + 2 * self.pad || self.window > w + 2 * self.pad {
            return Err(Error::Shape(format!(
                "pool window {} larger than padded {h}x{w} input",
                self.window
            )));
        }
        let oh = (h + 2 * self.pad - self.window) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.window) / self.stride + 1;
        Ok((oh, ow))
    }
}

/// `out = a @ b` for row-major `a [m,k]`, `b [k,n]`.
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::ZERO; m * n];
    let body = |i: usize, row: &mut [T]| {
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::ZERO {
                continue;
            }
            let b_row = &b[p * n..p * n + n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    out
}

/// `out += a @ b^T` for `a [m,k]`, `b [n,k]`, `out [m,n]`.
pub fn gemm_abt_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let body = |i: usize, row: &mut [T]| {
        let a_row = &a[i * k..i * k + k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..j * k + k];
            let mut acc = T::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// `out += a^T @ b` for `a [m,k]`, `b [m,n]`, `out [k,n]`.
pub fn gemm_atb_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let body = |p: usize, row: &mut [T]| {
        for i in 0..m {
            let a_ip = a[i * k + p];
            if a_ip == T::ZERO {
                continue;
            }
            let b_row = &b[i * n..i * n + n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && k > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(p, row)| body(p, row));
    } else {
        for (p, row) in out.chunks_mut(n).enumerate() {
            body(p, row);
        }
    }
}

/// Unrolls one image `[cin, h, w]` into columns `[cin*kh*kw, oh*ow]` with
/// zero padding. Row index order is (ci, ky, kx), matching the weight
/// layout `[cout, cin, kh, kw]`.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    img: &[T],
    cin: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let (kh, kw) = spec.kernel;
    let mut cols = vec![T::ZERO; cin * kh * kw * oh * ow];
    let ohw = oh * ow;
    for ci in 0..cin {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * ohw;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                        - spec.pad_h.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = iy as usize * w;
                    let dst_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.pad_w.0 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[dst_row + ox] = plane[src_row + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds column gradients back into one image `[cin, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<T: Scalar>(
    dcols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    dimg: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let ohw = oh * ow;
    for ci in 0..cin {
        let plane = &mut dimg[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * ohw;
                for oy in 0..oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                        - spec.pad_h.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = iy as usize * w;
                    let src_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.pad_w.0 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[dst_row + ix as usize] += dcols[src_row + ox];
                    }
                }
            }
        }
    }
}

/// Dilated cross-correlation of `x [n,cin,h,w]` with `w [cout,cin,kh,kw]`.
/// Returns the output buffer and its shape.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    xs: [usize; 4],
    weight: &[T],
    ws: [usize; 4],
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<(Vec<T>, [usize; 4])> {
    let [n, cin, h, w] = xs;
    let [cout, wcin, kh, kw] = ws;
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv2d: input {xs:?} has Cin={cin} but weight {ws:?} has Cin={wcin}"
        )));
    }
    if (kh, kw) != spec.kernel {
        return Err(Error::Shape(format!(
            "conv2d: weight {ws:?} disagrees with spec kernel {:?}",
            spec.kernel
        )));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::Shape(format!(
                "conv2d: bias has {} elements, weight {ws:?} wants {cout}",
                b.len()
            )));
        }
    }
    let (oh, ow) = spec.out_hw(h, w)?;
    let k = cin * kh * kw;
    let ohw = oh * ow;
    let mut out = vec![T::ZERO; n * cout * ohw];
    for img in 0..n {
        let cols = im2col(&x[img * cin * h * w..], cin, h, w, spec, oh, ow);
        let y = gemm_nn(cout, k, ohw, weight, &cols);
        let dst = &mut out[img * cout * ohw..(img + 1) * cout * ohw];
        dst.copy_from_slice(&y);
        if let Some(b) = bias {
            for co in 0..cout {
                let bv = b[co];
                for o in &mut dst[co * ohw..(co + 1) * ohw] {
                    *o += bv;
                }
            }
        }
    }
    Ok((out, [n, cout, oh, ow]))
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    xs: [usize; 4],
    weight: &[T],
    ws: [usize; 4],
    spec: &ConvSpec,
    dy: &[T],
    with_bias: bool,
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let [n, cin, h, w] = xs;
    let [cout, _, kh, kw] = ws;
    let (oh, ow) = spec.out_hw(h, w).expect("backward after a valid forward");
    let k = cin * kh * kw;
    let ohw = oh * ow;

    let mut dx = vec![T::ZERO; x.len()];
    let mut dw = vec![T::ZERO; weight.len()];
    let mut db = if with_bias {
        Some(vec![T::ZERO; cout])
    } else {
        None
    };

    // w^T [k, cout] for the input gradient GEMM
    let mut wt = vec![T::ZERO; k * cout];
    for co in 0..cout {
        for p in 0..k {
            wt[p * cout + co] = weight[co * k + p];
        }
    }

    for img in 0..n {
        let dy_img = &dy[img * cout * ohw..(img + 1) * cout * ohw];
        let cols = im2col(&x[img * cin * h * w..], cin, h, w, spec, oh, ow);
        // dW += dY_img [cout, ohw] @ cols^T [ohw, k]
        gemm_abt_acc(cout, ohw, k, dy_img, &cols, &mut dw);
        // dcols = w^T [k, cout] @ dY_img [cout, ohw]
        let dcols = gemm_nn(k, cout, ohw, &wt, dy_img);
        col2im_acc(
            &dcols,
            cin,
            h,
            w,
            spec,
            oh,
            ow,
            &mut dx[img * cin * h * w..(img + 1) * cin * h * w],
        );
        if let Some(db) = db.as_mut() {
            for co in 0..cout {
                let mut acc = T::ZERO;
                for &g in &dy_img[co * ohw..(co + 1) * ohw] {
                    acc += g;
                }
                db[co] += acc;
            }
        }
    }
    (dx, dw, db)
}

/// Max pooling with implicit -inf padding. Returns output, its shape, and
/// the flat argmax index of every output element (first maximum in row-major
/// scan order on ties) for the backward pass.
pub fn maxpool2d_forward<T: Scalar>(
    x: &[T],
    xs: [usize; 4],
    spec: &PoolSpec,
) -> Result<(Vec<T>, [usize; 4], Vec<usize>)> {
    let [n, c, h, w] = xs;
    let (oh, ow) = spec.out_hw(h, w)?;
    let mut out = vec![T::ZERO; n * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            let obase = (img * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = (oy * spec.stride) as isize - spec.pad as isize;
                    let x0 = (ox * spec.stride) as isize - spec.pad as isize;
                    let mut best: Option<(T, usize)> = None;
                    for ky in 0..spec.window {
                        let iy = y0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..spec.window {
                            let ix = x0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            let v = x[idx];
                            // strict > keeps the first maximum on ties
                            match best {
                                Some((bv, _)) if v <= bv => {}
                                _ => best = Some((v, idx)),
                            }
                        }
                    }
                    let (v, idx) = best.expect("window overlaps input by construction");
                    out[obase + oy * ow + ox] = v;
                    argmax[obase + oy * ow + ox] = idx;
                }
            }
        }
    }
    Ok((out, [n, c, oh, ow], argmax))
}

pub fn maxpool2d_backward<T: Scalar>(argmax: &[usize], dy: &[T], x_len: usize) -> Vec<T> {
    let mut dx = vec![T::ZERO; x_len];
    for (&idx, &g) in argmax.iter().zip(dy) {
        dx[idx] += g;
    }
    dx
}

#[inline]
fn interp_setup(o: usize, scale: f64, extent: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) * scale - 0.5;
    let floor = src.floor();
    let t = src - floor;
    let lo = (floor.max(0.0) as usize).min(extent - 1);
    let hi = ((floor + 1.0).max(0.0) as usize).min(extent - 1);
    (lo, hi, t)
}

/// Bilinear 2x upsampling with half-pixel centers (align-corners = false).
pub fn upsample2x_forward<T: Scalar>(x: &[T], xs: [usize; 4]) -> (Vec<T>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::ZERO; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, ty) = interp_setup(oy, 0.5, h);
            let (wy0, wy1) = (T::from_f64(1.0 - ty), T::from_f64(ty));
            for ox in 0..ow {
                let (x0, x1, tx) = interp_setup(ox, 0.5, w);
                let (wx0, wx1) = (T::from_f64(1.0 - tx), T::from_f64(tx));
                dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    (out, [n, c, oh, ow])
}

pub fn upsample2x_backward<T: Scalar>(dy: &[T], xs: [usize; 4]) -> Vec<T> {
    let [n, c, h, w] = xs;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::ZERO; n * c * h * w];
    for plane in 0..n * c {
        let src = &dy[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, ty) = interp_setup(oy, 0.5, h);
            let (wy0, wy1) = (T::from_f64(1.0 - ty), T::from_f64(ty));
            for ox in 0..ow {
                let (x0, x1, tx) = interp_setup(ox, 0.5, w);
                let (wx0, wx1) = (T::from_f64(1.0 - tx), T::from_f64(tx));
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += wy0 * wx0 * g;
                dst[y0 * w + x1] += wy0 * wx1 * g;
                dst[y1 * w + x0] += wy1 * wx0 * g;
                dst[y1 * w + x1] += wy1 * wx1 * g;
            }
        }
    }
    dx
}

/// General bilinear resize of one plane, same half-pixel convention as
/// [`upsample2x_forward`]; an identity when the sizes already match.
pub fn resize_bilinear_plane<T: Scalar>(
    src: &[T],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let scale_y = h as f64 / oh as f64;
    let scale_x = w as f64 / ow as f64;
    let mut out = vec![T::ZERO; oh * ow];
    for oy in 0..oh {
        let (y0, y1, ty) = interp_setup(oy, scale_y, h);
        let (wy0, wy1) = (T::from_f64(1.0 - ty), T::from_f64(ty));
        for ox in 0..ow {
            let (x0, x1, tx) = interp_setup(ox, scale_x, w);
            let (wx0, wx1) = (T::from_f64(1.0 - tx), T::from_f64(tx));
            out[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
        }
    }
    out
}

/// Nearest-neighbor resize of one plane (half-pixel source mapping).
pub fn resize_nearest_plane<T: Scalar>(
    src: &[T],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let scale_y = h as f64 / oh as f64;
    let scale_x = w as f64 / ow as f64;
    let mut out = vec![T::ZERO; oh * ow];
    for oy in 0..oh {
        let iy = (((oy as f64 + 0.5) * scale_y).floor().max(0.0) as usize).min(h - 1);
        for ox in 0..ow {
            let ix = (((ox as f64 + 0.5) * scale_x).floor().max(0.0) as usize).min(w - 1);
            out[oy * ow + ox] = src[iy * w + ix];
        }
    }
    out
}
