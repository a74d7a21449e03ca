//! Slow, obviously-correct reference implementations.
//!
//! These exist so the fast kernels have something independent to be checked
//! against: plain nested loops working straight from the definitions, no
//! im2col, no GEMM, no shared helpers with the real kernels. Tests compare
//! the two paths elementwise on random inputs; keep it that way when
//! touching either side.

use crate::kernels::{ConvSpec, PoolSpec};
use crate::tensor::Scalar;

/// Dilated cross-correlation, six explicit loops over the definition.
pub fn conv2d<T: Scalar>(
    x: &[T],
    xs: [usize; 4],
    w: &[T],
    ws: [usize; 4],
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> (Vec<T>, [usize; 4]) {
    let [n, cin, h, ww] = xs;
    let [cout, _, kh, kw] = ws;
    let (oh, ow) = spec.out_hw(h, ww).expect("caller passes a valid spec");
    let mut out = vec![T::ZERO; n * cout * oh * ow];
    for img in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::ZERO;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                    - spec.pad_h.0 as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - spec.pad_w.0 as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= ww as isize {
                                    continue; // zero padding
                                }
                                let xv = x[((img * cin + ci) * h + iy as usize) * ww
                                    + ix as usize];
                                let wv = w[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b[co];
                    }
                    out[((img * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [n, cout, oh, ow])
}

/// Windowed maximum with -inf padding semantics.
pub fn maxpool2d<T: Scalar>(x: &[T], xs: [usize; 4], spec: &PoolSpec) -> (Vec<T>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let (oh, ow) = spec.out_hw(h, w).expect("caller passes a valid spec");
    let mut out = vec![T::ZERO; n * c * oh * ow];
    for img in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<T> = None;
                    for ky in 0..spec.window {
                        for kx in 0..spec.window {
                            let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = x[((img * c + ch) * h + iy as usize) * w + ix as usize];
                            best = Some(match best {
                                Some(b) if b >= v => b,
                                _ => v,
                            });
                        }
                    }
                    out[((img * c + ch) * oh + oy) * ow + ox] =
                        best.expect("window overlaps input");
                }
            }
        }
    }
    (out, [n, c, oh, ow])
}

/// Triple-loop matrix product for one `[m,k] @ [k,n]` pair.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::ZERO;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Scalar half-pixel bilinear sampling of one plane (align-corners = false).
pub fn resize_bilinear<T: Scalar>(
    src: &[T],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let clamp = |v: f64, hi: usize| -> usize { v.max(0.0).min(hi as f64 - 1.0) as usize };
    let mut out = vec![T::ZERO; oh * ow];
    for oy in 0..oh {
        let sy = (oy as f64 + 0.5) * (h as f64 / oh as f64) - 0.5;
        let y0 = sy.floor();
        let ty = sy - y0;
        let (ylo, yhi) = (clamp(y0, h), clamp(y0 + 1.0, h));
        for ox in 0..ow {
            let sx = (ox as f64 + 0.5) * (w as f64 / ow as f64) - 0.5;
            let x0 = sx.floor();
            let tx = sx - x0;
            let (xlo, xhi) = (clamp(x0, w), clamp(x0 + 1.0, w));
            let v = (1.0 - ty)
                * ((1.0 - tx) * src[ylo * w + xlo].to_f64() + tx * src[ylo * w + xhi].to_f64())
                + ty * ((1.0 - tx) * src[yhi * w + xlo].to_f64()
                    + tx * src[yhi * w + xhi].to_f64());
            out[oy * ow + ox] = T::from_f64(v);
        }
    }
    out
}

/// Direct O(n^2) single-head scaled dot-product attention on one sequence:
/// `softmax(q k^T / sqrt(d)) v` for `q, k, v` of shape `[n, d]`.
pub fn attention<T: Scalar>(q: &[T], k: &[T], v: &[T], n: usize, d: usize) -> Vec<T> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![T::ZERO; n * d];
    for i in 0..n {
        let mut scores = vec![0.0f64; n];
        for j in 0..n {
            let mut dot = 0.0;
            for p in 0..d {
                dot += q[i * d + p].to_f64() * k[j * d + p].to_f64();
            }
            scores[j] = dot * scale;
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - mx).exp();
            denom += *s;
        }
        for p in 0..d {
            let mut acc = 0.0;
            for j in 0..n {
                acc += scores[j] / denom * v[j * d + p].to_f64();
            }
            out[i * d + p] = T::from_f64(acc);
        }
    }
    out
}
