//! Selective-scan recurrence kernels.
//!
//! Per channel `c` and state component `n`:
//!
//! ```text
//! h[t] = a_bar[t] * h[t-1] + b_bar[t] * x[t, c]
//! y[t, c] = sum_n c_proj[t, n] * h[t]
//! ```
//!
//! with `a_bar = exp(delta * A)` and `b_bar = delta * B`. The adjoint is
//! the same recurrence run backwards in time.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

pub(crate) fn check_dims(
    x: &[usize],
    delta: &[usize],
    a: &[usize],
    b: &[usize],
    c: &[usize],
) -> Result<ScanDims> {
    let (l, ch) = match *x {
        [l, ch] => (l, ch),
        _ => return Err(Error::dim("selective_scan x", x, &[0, 0])),
    };
    if delta != [l, ch] {
        return Err(Error::dim("selective_scan delta", x, delta));
    }
    let n = match *a {
        [ca, n] if ca == ch => n,
        _ => return Err(Error::dim("selective_scan A", x, a)),
    };
    if b != [l, n] {
        return Err(Error::dim("selective_scan B", a, b));
    }
    if c != [l, n] {
        return Err(Error::dim("selective_scan C", a, c));
    }
    Ok(ScanDims { len: l, channels: ch, state: n })
}

/// `a_bar[t, c, n] = exp(delta[t, c] * A[c, n])`, `b_bar[t, c, n] = delta[t, c] * B[t, n]`.
pub(crate) fn discretize_into<T: Scalar>(delta: &[T], a: &[T], b: &[T], d: ScanDims, a_bar: &mut [T], b_bar: &mut [T]) {
    let (ch, n) = (d.channels, d.state);
    for t in 0..d.len {
        let bt = &b[t * n..(t + 1) * n];
        for c in 0..ch {
            let dt = delta[t * ch + c];
            let ac = &a[c * n..(c + 1) * n];
            let off = (t * ch + c) * n;
            for k in 0..n {
                a_bar[off + k] = (dt * ac[k]).exp_nonpos();
                b_bar[off + k] = dt * bt[k];
            }
        }
    }
}

/// Broadcasts a per-channel row `[C]` to `[C, N]`.
#[inline]
fn expand_channels<T: Scalar>(src: &[T], n: usize, dst: &mut [T]) {
    for (d, &v) in dst.chunks_exact_mut(n).zip(src) {
        d.fill(v);
    }
}

/// `y[c] = sum_n c_row[n] * h[c, n]`.
#[inline]
fn project<T: Scalar>(h: &[T], c_row: &[T], y: &mut [T]) {
    for (yv, hc) in y.iter_mut().zip(h.chunks_exact(c_row.len())) {
        let mut acc = T::zero();
        for (&cv, &hv) in c_row.iter().zip(hc) {
            acc = acc + cv * hv;
        }
        *yv = acc;
    }
}

/// `a_bar` for one time step: `exp(delta[c] * A[c, n])` over `[C, N]`.
#[inline(always)]
fn transition_row<T: Scalar>(delta_row: &[T], a: &[T], n: usize, out: &mut [T]) {
    for ((o, ac), &dt) in out.chunks_exact_mut(n).zip(a.chunks_exact(n)).zip(delta_row) {
        for (ov, &av) in o.iter_mut().zip(ac) {
            *ov = dt * av;
        }
    }
    for v in out.iter_mut() {
        *v = v.exp_nonpos();
    }
}

/// Sequential recurrence over precomputed `a_bar`/`b_bar`; optionally keeps
/// every hidden state `h[t, c, n]`.
pub(crate) fn recur<T: Scalar>(
    x: &[T],
    a_bar: &[T],
    b_bar: &[T],
    c_proj: &[T],
    d: ScanDims,
    mut states: Option<&mut [T]>,
) -> Vec<T> {
    let (ch, n) = (d.channels, d.state);
    let cn = ch * n;
    let mut h = vec![T::zero(); cn];
    let mut xe = vec![T::zero(); cn];
    let mut y = vec![T::zero(); d.len * ch];
    for t in 0..d.len {
        let ab = &a_bar[t * cn..(t + 1) * cn];
        let bb = &b_bar[t * cn..(t + 1) * cn];
        expand_channels(&x[t * ch..(t + 1) * ch], n, &mut xe);
        for j in 0..cn {
            h[j] = ab[j] * h[j] + bb[j] * xe[j];
        }
        project(&h, &c_proj[t * n..(t + 1) * n], &mut y[t * ch..(t + 1) * ch]);
        if let Some(st) = states.as_deref_mut() {
            st[t * cn..(t + 1) * cn].copy_from_slice(&h);
        }
    }
    y
}

/// Saved activations for the adjoint of one scan.
pub struct ScanSaved<T> {
    states: Vec<T>,
    order: Option<Arc<Vec<usize>>>,
}

/// Discretizes on the fly and runs the recurrence, keeping the hidden states. Arithmetic matches [`discretize_into`] followed by [`recur`].
pub(crate) fn forward_saving<T: Scalar>(
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: ScanDims,
    order: Option<Arc<Vec<usize>>>,
) -> (Vec<T>, ScanSaved<T>) {
    // literal state sizes let the inner loops unroll
    let (y, states) = match d.state {
        4 => forward_saving_n(x, delta, a, b, c, d, order.as_deref().map(Vec::as_slice), 4),
        8 => forward_saving_n(x, delta, a, b, c, d, order.as_deref().map(Vec::as_slice), 8),
        16 => forward_saving_n(x, delta, a, b, c, d, order.as_deref().map(Vec::as_slice), 16),
        n => forward_saving_n(x, delta, a, b, c, d, order.as_deref().map(Vec::as_slice), n),
    };
    (y, ScanSaved { states, order })
}

#[inline(always)]
fn forward_saving_n<T: Scalar>(
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: ScanDims,
    order: Option<&[usize]>,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    let (l, ch) = (d.len, d.channels);
    let cn = ch * n;
    let a = &a[..cn];
    let row = |t: usize| order.map_or(t, |o| o[t]);
    let mut states = Vec::with_capacity(l * cn);
    let mut h = vec![T::zero(); cn];
    let mut ab = vec![T::zero(); cn];
    let mut y = vec![T::zero(); l * ch];
    for t in 0..l {
        let r = row(t);
        transition_row(&delta[r * ch..(r + 1) * ch], a, n, &mut ab);
        let (bt, ct) = (&b[r * n..(r + 1) * n], &c[r * n..(r + 1) * n]);
        let rows = ab
            .chunks_exact(n)
            .zip(h.chunks_exact_mut(n))
            .zip(&x[r * ch..(r + 1) * ch])
            .zip(&delta[r * ch..(r + 1) * ch])
            .zip(&mut y[r * ch..(r + 1) * ch]);
        for ((((abc, hc), &xc), &dt), yc) in rows {
            let mut acc = T::zero();
            for k in 0..n {
                let hv = abc[k] * hc[k] + (dt * bt[k]) * xc;
                hc[k] = hv;
                acc = acc + ct[k] * hv;
            }
            *yc = acc;
        }
        states.extend_from_slice(&h);
    }
    (y, states)
}

pub(crate) struct ScanGrads<T> {
    pub x: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
}

/// Reverse-time adjoint recurrence.
///
/// With `gh[t] = gy[t, c] * C[t] + a_bar[t+1] * gh[t+1]`, the input
/// gradients follow from `h[t-1]`, `a_bar[t]` and the chain rule through
/// `a_bar = exp(delta A)` and `b_bar = delta B`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    saved: &ScanSaved<T>,
    gy: &[T],
    d: ScanDims,
) -> ScanGrads<T> {
    let order = saved.order.as_deref().map(Vec::as_slice);
    match d.state {
        4 => backward_n(x, delta, a, b, c, saved, order, gy, d, 4),
        8 => backward_n(x, delta, a, b, c, saved, order, gy, d, 8),
        16 => backward_n(x, delta, a, b, c, saved, order, gy, d, 16),
        n => backward_n(x, delta, a, b, c, saved, order, gy, d, n),
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn backward_n<T: Scalar>(
    x: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    saved: &ScanSaved<T>,
    order: Option<&[usize]>,
    gy: &[T],
    d: ScanDims,
    n: usize,
) -> ScanGrads<T> {
    let (l, ch) = (d.len, d.channels);
    let row = |t: usize| order.map_or(t, |o| o[t]);
    let cn = ch * n;
    let a = &a[..cn];
    let mut g = ScanGrads {
        x: vec![T::zero(); l * ch],
        delta: vec![T::zero(); l * ch],
        a: vec![T::zero(); cn],
        b: vec![T::zero(); l * n],
        c: vec![T::zero(); l * n],
    };
    let zeros = vec![T::zero(); cn];
    // carry[c, n] = a_bar[t+1] * gh[t+1]
    let mut carry = vec![T::zero(); cn];
    let mut abt = vec![T::zero(); cn];
    for t in (0..l).rev() {
        let r = row(t);
        transition_row(&delta[r * ch..(r + 1) * ch], a, n, &mut abt);
        let (bt, ct) = (&b[r * n..(r + 1) * n], &c[r * n..(r + 1) * n]);
        let gbt = &mut g.b[r * n..(r + 1) * n];
        let gct = &mut g.c[r * n..(r + 1) * n];
        let hs = &saved.states[t * cn..(t + 1) * cn];
        let hp = if t > 0 { &saved.states[(t - 1) * cn..t * cn] } else { &zeros[..] };
        let rows = hs
            .chunks_exact(n)
            .zip(hp.chunks_exact(n))
            .zip(abt.chunks_exact(n))
            .zip(a.chunks_exact(n))
            .zip(g.a.chunks_exact_mut(n))
            .zip(carry.chunks_exact_mut(n))
            .zip(&gy[r * ch..(r + 1) * ch])
            .zip(&x[r * ch..(r + 1) * ch])
            .zip(&delta[r * ch..(r + 1) * ch])
            .zip(g.x[r * ch..(r + 1) * ch].iter_mut().zip(&mut g.delta[r * ch..(r + 1) * ch]));
        for (((((((((hsc, hpc), abc), ac), gac), cc), &gyc), &xc), &dt), (gxc, gdc)) in rows {
            let (mut sx, mut sd) = (T::zero(), T::zero());
            for k in 0..n {
                let ghj = gyc * ct[k] + cc[k];
                gct[k] = gct[k] + gyc * hsc[k];
                // through a_bar = exp(dt * A)
                let g_abar = ghj * hpc[k] * abc[k];
                let ghx = ghj * xc;
                sd = sd + (g_abar * ac[k] + ghx * bt[k]);
                gac[k] = gac[k] + g_abar * dt;
                gbt[k] = gbt[k] + ghx * dt;
                sx = sx + ghj * dt * bt[k];
                cc[k] = abc[k] * ghj;
            }
            *gxc = sx;
            *gdc = sd;
        }
    }
    g
}

/// One element of the linear-recurrence monoid: the affine map `h -> a*h + b`
/// applied componentwise over `C * N` lanes.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanElement<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> ScanElement<T> {
    pub fn identity(width: usize) -> Self {
        Self {
            a: vec![T::one(); width],
            b: vec![T::zero(); width],
        }
    }
}

/// `(a1, b1) then (a2, b2) = (a2 * a1, a2 * b1 + b2)`.
pub fn combine<T: Scalar>(first: &ScanElement<T>, second: &ScanElement<T>) -> ScanElement<T> {
    let a = first.a.iter().zip(&second.a).map(|(&a1, &a2)| a2 * a1).collect();
    let b = first
        .b
        .iter()
        .zip(&second.a)
        .zip(&second.b)
        .map(|((&b1, &a2), &b2)| a2 * b1 + b2)
        .collect();
    ScanElement { a, b }
}

/// Sequential base case length for the parallel scan.
pub const CHUNK: usize = 64;

/// Exclusive Blelloch scan (up-sweep then down-sweep) over `items`, padded to
/// a power of two with identities. Returns, for every position, the
/// composition of all earlier elements.
pub fn blelloch_exclusive<T: Scalar>(items: &[ScanElement<T>], width: usize) -> Vec<ScanElement<T>> {
    let m = items.len();
    let size = m.next_power_of_two().max(1);
    let mut tree: Vec<ScanElement<T>> = items.to_vec();
    tree.resize(size, ScanElement::identity(width));

    let mut stride = 1;
    while stride < size {
        let mut i = 2 * stride - 1;
        while i < size {
            tree[i] = combine(&tree[i - stride], &tree[i]);
            i += 2 * stride;
        }
        stride *= 2;
    }
    tree[size - 1] = ScanElement::identity(width);
    stride = size / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < size {
            let left = tree[i - stride].clone();
            tree[i - stride] = tree[i].clone();
            tree[i] = combine(&tree[i], &left);
            i += 2 * stride;
        }
        stride /= 2;
    }
    tree.truncate(m);
    tree
}

/// Parallel evaluation of the recurrence: chunk aggregates, an exclusive
/// Blelloch scan over the aggregates, then a sequential sweep inside each
/// chunk seeded with its carried-in state.
pub(crate) fn recur_parallel<T: Scalar>(x: &[T], a_bar: &[T], b_bar: &[T], c_proj: &[T], d: ScanDims) -> Vec<T> {
    let (ch, n) = (d.channels, d.state);
    let width = ch * n;
    let starts: Vec<usize> = (0..d.len).step_by(CHUNK).collect();

    let aggregates: Vec<ScanElement<T>> = starts
        .par_iter()
        .map(|&t0| {
            let t1 = (t0 + CHUNK).min(d.len);
            let mut agg = ScanElement::identity(width);
            for t in t0..t1 {
                for c in 0..ch {
                    let xv = x[t * ch + c];
                    for k in 0..n {
                        let j = c * n + k;
                        let off = t * width + j;
                        agg.a[j] = a_bar[off] * agg.a[j];
                        agg.b[j] = a_bar[off] * agg.b[j] + b_bar[off] * xv;
                    }
                }
            }
            agg
        })
        .collect();

    let prefixes = blelloch_exclusive(&aggregates, width);

    let pieces: Vec<Vec<T>> = starts
        .par_iter()
        .zip(prefixes.par_iter())
        .map(|(&t0, prefix)| {
            let t1 = (t0 + CHUNK).min(d.len);
            // zero initial state, so the carried-in state is the prefix offset
            let mut h = prefix.b.clone();
            let mut y = vec![T::zero(); (t1 - t0) * ch];
            for t in t0..t1 {
                let ct = &c_proj[t * n..(t + 1) * n];
                for c in 0..ch {
                    let xv = x[t * ch + c];
                    let mut acc = T::zero();
                    for k in 0..n {
                        let j = c * n + k;
                        let off = t * width + j;
                        h[j] = a_bar[off] * h[j] + b_bar[off] * xv;
                        acc = acc + ct[k] * h[j];
                    }
                    y[(t - t0) * ch + c] = acc;
                }
            }
            y
        })
        .collect();
    pieces.concat()
}
