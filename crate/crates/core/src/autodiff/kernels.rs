//! Forward and adjoint kernels for the fixed operation set.
//!
//! All kernels work on flat channels-last buffers. Adjoint kernels add into
//! their output gradient buffers rather than overwrite them.

use crate::tensor::{s, Scalar};

/// `y[r, j] = sum_i x[r, i] * w[i, j] + b[j]`.
pub fn linear_fwd<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, cin: usize, cout: usize) -> Vec<T> {
    let rows = x.len() / cin;
    let mut y = vec![T::zero(); rows * cout];
    let beta = match b {
        Some(b) => {
            for yr in y.chunks_exact_mut(cout) {
                yr.copy_from_slice(b);
            }
            T::one()
        }
        None => T::zero(),
    };
    T::gemm(rows, cin, cout, x, cin, 1, w, cout, 1, beta, &mut y);
    y
}

#[allow(clippy::too_many_arguments)]
pub fn linear_bwd<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    cin: usize,
    cout: usize,
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let rows = gy.len() / cout;
    if let Some(gx) = gx {
        // gx += gy w^T
        T::gemm(rows, cout, cin, gy, cout, 1, w, 1, cout, T::one(), gx);
    }
    if let Some(gw) = gw {
        // gw += x^T gy
        T::gemm(cin, rows, cout, x, 1, cin, gy, cout, 1, T::one(), gw);
    }
    if let Some(gb) = gb {
        for gyr in gy.chunks_exact(cout) {
            for (gbv, &g) in gb.iter_mut().zip(gyr) {
                *gbv = *gbv + g;
            }
        }
    }
}

/// Geometry of a 3x3 convolution with zero padding 1.
#[derive(Clone, Copy, Debug)]
pub struct Conv3x3Dims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl Conv3x3Dims {
    pub fn out_hw(&self) -> (usize, usize) {
        ((self.h - 1) / self.stride + 1, (self.w - 1) / self.stride + 1)
    }

    /// Input coordinate for output `o` and tap `k`, or `None` in the padding.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, extent: usize) -> Option<usize> {
        let p = (o * stride + k) as isize - 1;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// Weights are laid out `[3, 3, Cin, Cout]`.
pub fn conv3x3_fwd<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, d: Conv3x3Dims) -> Vec<T> {
    let (ho, wo) = d.out_hw();
    let mut y = vec![T::zero(); ho * wo * d.cout];
    for oy in 0..ho {
        for ox in 0..wo {
            let yo = &mut y[(oy * wo + ox) * d.cout..(oy * wo + ox + 1) * d.cout];
            if let Some(b) = b {
                yo.copy_from_slice(b);
            }
            for ky in 0..3 {
                let Some(iy) = Conv3x3Dims::src(oy, ky, d.stride, d.h) else { continue };
                for kx in 0..3 {
                    let Some(ix) = Conv3x3Dims::src(ox, kx, d.stride, d.w) else { continue };
                    let xi = &x[(iy * d.w + ix) * d.cin..(iy * d.w + ix + 1) * d.cin];
                    let wk = &w[(ky * 3 + kx) * d.cin * d.cout..(ky * 3 + kx + 1) * d.cin * d.cout];
                    for (ci, &xv) in xi.iter().enumerate() {
                        let wr = &wk[ci * d.cout..(ci + 1) * d.cout];
                        for (yv, &wv) in yo.iter_mut().zip(wr) {
                            *yv = *yv + xv * wv;
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn conv3x3_bwd<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    d: Conv3x3Dims,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let (ho, wo) = d.out_hw();
    for oy in 0..ho {
        for ox in 0..wo {
            let go = &gy[(oy * wo + ox) * d.cout..(oy * wo + ox + 1) * d.cout];
            for ky in 0..3 {
                let Some(iy) = Conv3x3Dims::src(oy, ky, d.stride, d.h) else { continue };
                for kx in 0..3 {
                    let Some(ix) = Conv3x3Dims::src(ox, kx, d.stride, d.w) else { continue };
                    let base = (iy * d.w + ix) * d.cin;
                    let koff = (ky * 3 + kx) * d.cin * d.cout;
                    for ci in 0..d.cin {
                        let wr = &w[koff + ci * d.cout..koff + (ci + 1) * d.cout];
                        if let Some(gx) = gx.as_deref_mut() {
                            let mut acc = T::zero();
                            for (&g, &wv) in go.iter().zip(wr) {
                                acc = acc + g * wv;
                            }
                            gx[base + ci] = gx[base + ci] + acc;
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            let xv = x[base + ci];
                            let gwr = &mut gw[koff + ci * d.cout..koff + (ci + 1) * d.cout];
                            for (gwv, &g) in gwr.iter_mut().zip(go) {
                                *gwv = *gwv + xv * g;
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(gb) = gb {
        for go in gy.chunks_exact(d.cout) {
            for (gbv, &g) in gb.iter_mut().zip(go) {
                *gbv = *gbv + g;
            }
        }
    }
}

/// Depth-to-space by 2: `out[2h+dy, 2w+dx, c] = x[h, w, 4c + 2dy + dx]`.
pub fn pixel_shuffle_index(h: usize, w: usize, c: usize) -> Vec<usize> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut idx = Vec::with_capacity(ho * wo * c);
    for oy in 0..ho {
        for ox in 0..wo {
            let (iy, dy, ix, dx) = (oy / 2, oy % 2, ox / 2, ox % 2);
            for ch in 0..c {
                idx.push((iy * w + ix) * 4 * c + ch * 4 + dy * 2 + dx);
            }
        }
    }
    idx
}

/// Catmull-Rom cubic convolution weight (`a = -0.5`).
pub fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Four-tap interpolation plan along one axis: for every output index the
/// clamped source indices and their weights (half-pixel centers).
#[derive(Clone, Debug)]
pub struct ResizeAxis {
    pub taps: Vec<[(usize, f64); 4]>,
}

impl ResizeAxis {
    pub fn bicubic(in_len: usize, factor: usize) -> Self {
        let out_len = in_len * factor;
        let taps = (0..out_len)
            .map(|o| {
                let src = (o as f64 + 0.5) / factor as f64 - 0.5;
                let base = src.floor();
                let frac = src - base;
                let mut t = [(0usize, 0.0f64); 4];
                for (k, tap) in t.iter_mut().enumerate() {
                    let off = k as isize - 1;
                    let i = (base as isize + off).clamp(0, in_len as isize - 1) as usize;
                    *tap = (i, cubic_weight(frac - off as f64));
                }
                t
            })
            .collect();
        Self { taps }
    }
}

/// Separable resize of an `[H, W, C]` buffer: rows first, then columns.
pub fn resize_fwd<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, ry: &ResizeAxis, rx: &ResizeAxis) -> Vec<T> {
    let ho = ry.taps.len();
    let wo = rx.taps.len();
    let mut tmp = vec![T::zero(); ho * w * c];
    for (oy, taps) in ry.taps.iter().enumerate() {
        let dst = &mut tmp[oy * w * c..(oy + 1) * w * c];
        for &(iy, wt) in taps {
            let wt: T = s(wt);
            let src = &x[iy * w * c..(iy + 1) * w * c];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = *d + wt * v;
            }
        }
    }
    let mut y = vec![T::zero(); ho * wo * c];
    for oy in 0..ho {
        for (ox, taps) in rx.taps.iter().enumerate() {
            let dst = &mut y[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
            for &(ix, wt) in taps {
                let wt: T = s(wt);
                let src = &tmp[(oy * w + ix) * c..(oy * w + ix + 1) * c];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = *d + wt * v;
                }
            }
        }
    }
    let _ = h;
    y
}

pub fn resize_bwd<T: Scalar>(gy: &[T], h: usize, w: usize, c: usize, ry: &ResizeAxis, rx: &ResizeAxis, gx: &mut [T]) {
    let ho = ry.taps.len();
    let wo = rx.taps.len();
    let mut gtmp = vec![T::zero(); ho * w * c];
    for oy in 0..ho {
        for (ox, taps) in rx.taps.iter().enumerate() {
            let src = &gy[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
            for &(ix, wt) in taps {
                let wt: T = s(wt);
                let dst = &mut gtmp[(oy * w + ix) * c..(oy * w + ix + 1) * c];
                for (d, &g) in dst.iter_mut().zip(src) {
                    *d = *d + wt * g;
                }
            }
        }
    }
    for (oy, taps) in ry.taps.iter().enumerate() {
        let src = &gtmp[oy * w * c..(oy + 1) * w * c];
        for &(iy, wt) in taps {
            let wt: T = s(wt);
            let dst = &mut gx[iy * w * c..(iy + 1) * w * c];
            for (d, &g) in dst.iter_mut().zip(src) {
                *d = *d + wt * g;
            }
        }
    }
    let _ = h;
}

/// Normalizes each row over its channels. Returns `(y, xhat, rstd)`.
pub fn layer_norm_fwd<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let c = gamma.len();
    let cn: T = s(c as f64);
    let rows = x.len() / c;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for (r, xr) in x.chunks_exact(c).enumerate() {
        let mean = xr.iter().copied().sum::<T>() / cn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..c {
            let xh = (xr[i] - mean) * rs;
            xhat[r * c + i] = xh;
            y[r * c + i] = xh * gamma[i] + beta[i];
        }
    }
    (y, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_bwd<T: Scalar>(
    gy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    gx: Option<&mut [T]>,
    ggamma: Option<&mut [T]>,
    gbeta: Option<&mut [T]>,
) {
    let c = gamma.len();
    let cn: T = s(c as f64);
    if let Some(gx) = gx {
        for (r, (gyr, xhr)) in gy.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for i in 0..c {
                let gxh = gyr[i] * gamma[i];
                m1 = m1 + gxh;
                m2 = m2 + gxh * xhr[i];
            }
            m1 = m1 / cn;
            m2 = m2 / cn;
            for i in 0..c {
                let gxh = gyr[i] * gamma[i];
                gx[r * c + i] = gx[r * c + i] + rstd[r] * (gxh - m1 - xhr[i] * m2);
            }
        }
    }
    if let Some(gg) = ggamma {
        for (gyr, xhr) in gy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
            for i in 0..c {
                gg[i] = gg[i] + gyr[i] * xhr[i];
            }
        }
    }
    if let Some(gb) = gbeta {
        for gyr in gy.chunks_exact(c) {
            for i in 0..c {
                gb[i] = gb[i] + gyr[i];
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    let e = (-v.abs()).exp_nonpos();
    let r = T::one() / (T::one() + e);
    if v >= T::zero() {
        r
    } else {
        e * r
    }
}

#[inline]
pub fn silu<T: Scalar>(v: T) -> T {
    v * sigmoid(v)
}

#[inline]
pub fn silu_grad<T: Scalar>(v: T) -> T {
    let sg = sigmoid(v);
    sg * (T::one() + v * (T::one() - sg))
}

/// `log(1 + exp(v))` in the overflow-free form `max(v, 0) + log(1 + exp(-|v|))`.
#[inline]
pub fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp_nonpos().ln_1p_unit()
}

#[inline]
pub fn softplus_grad<T: Scalar>(v: T) -> T {
    sigmoid(v)
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_weights_sum_to_one() {
        for &frac in &[0.0, 0.125, 0.375, 0.5, 0.875] {
            let s: f64 = (-1..=2).map(|k| cubic_weight(frac - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for &y in &[1e-3, 0.05, 0.1, 2.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_same_shape_stride_two_halves() {
        let d = Conv3x3Dims { h: 4, w: 6, cin: 1, cout: 1, stride: 2 };
        assert_eq!(d.out_hw(), (2, 3));
        let d = Conv3x3Dims { stride: 1, ..d };
        assert_eq!(d.out_hw(), (4, 6));
    }

    #[test]
    fn pixel_shuffle_layout() {
        // one input pixel with 4 channels maps to a 2x2 block
        let idx = pixel_shuffle_index(1, 1, 1);
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }
}
