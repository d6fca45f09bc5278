//! Selective state space model kernels.
//!
//! The projection and timescale parameters `(B, C, delta)` are generated
//! from a sequence, discretized with the zero-order hold rule for `A` and the
//! first-order rule `b_bar = delta * B`, and the recurrence is evaluated
//! either sequentially or with a chunked parallel prefix scan.
//!
//! The dual-input variant ([`fssm_block`]) draws the parameters from one
//! sequence while scanning another.

pub mod scan;

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{kernels, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, ParamId, ParamStore};
use crate::tensor::{s, Scalar, Tensor};
use scan::ScanDims;

/// Kernel-level SSM parameters with `A` given explicitly.
#[derive(Clone, Debug)]
pub struct SsmParams<T> {
    /// `[C, N]`, strictly negative.
    pub a: Tensor<T>,
    /// `[C, N]`
    pub w_b: Tensor<T>,
    /// `[C, N]`
    pub w_c: Tensor<T>,
    /// `[C, C]`
    pub w_delta: Tensor<T>,
    /// `[C]`
    pub bias_delta: Tensor<T>,
}

impl<T: Scalar> SsmParams<T> {
    pub fn new(a: Tensor<T>, w_b: Tensor<T>, w_c: Tensor<T>, w_delta: Tensor<T>, bias_delta: Tensor<T>) -> Result<Self> {
        let (c, n) = match *a.shape() {
            [c, n] => (c, n),
            _ => return Err(Error::dim("SsmParams A", a.shape(), &[0, 0])),
        };
        if w_b.shape() != [c, n] {
            return Err(Error::dim("SsmParams W_B", a.shape(), w_b.shape()));
        }
        if w_c.shape() != [c, n] {
            return Err(Error::dim("SsmParams W_C", a.shape(), w_c.shape()));
        }
        if w_delta.shape() != [c, c] {
            return Err(Error::dim("SsmParams W_delta", a.shape(), w_delta.shape()));
        }
        if bias_delta.shape() != [c] {
            return Err(Error::dim("SsmParams bias_delta", a.shape(), bias_delta.shape()));
        }
        if a.data().iter().any(|&v| !(v < T::zero())) {
            return Err(Error::Usage("state matrix A must be strictly negative".into()));
        }
        Ok(Self { a, w_b, w_c, w_delta, bias_delta })
    }

    pub fn channels(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.a.shape()[1]
    }
}

/// Per-position discretized parameters.
#[derive(Clone, Debug)]
pub struct DiscretizedSsm<T> {
    /// `[L, C, N]`, every entry in `(0, 1]`.
    pub a_bar: Tensor<T>,
    /// `[L, C, N]`
    pub b_bar: Tensor<T>,
    /// `[L, N]`
    pub c_proj: Tensor<T>,
}

impl<T: Scalar> DiscretizedSsm<T> {
    fn dims(&self) -> ScanDims {
        let s = self.a_bar.shape();
        ScanDims { len: s[0], channels: s[1], state: s[2] }
    }
}

/// Hidden state of one running scan, `[C, N]`, zero at sequence start.
#[derive(Clone, Debug)]
pub struct ScanState<T> {
    pub h: Tensor<T>,
}

impl<T: Scalar> ScanState<T> {
    pub fn zeros(channels: usize, state: usize) -> Result<Self> {
        Ok(Self { h: Tensor::zeros(&[channels, state])? })
    }

    /// Advances one position and returns `y[t, ..]`.
    pub fn step(&mut self, x_t: &[T], d: &DiscretizedSsm<T>, t: usize) -> Vec<T> {
        let dims = d.dims();
        let (ch, n) = (dims.channels, dims.state);
        let ct = &d.c_proj.data()[t * n..(t + 1) * n];
        let h = self.h.data_mut();
        (0..ch)
            .map(|c| {
                let off = (t * ch + c) * n;
                let mut acc = T::zero();
                for k in 0..n {
                    let hv = d.a_bar.data()[off + k] * h[c * n + k] + d.b_bar.data()[off + k] * x_t[c];
                    h[c * n + k] = hv;
                    acc = acc + ct[k] * hv;
                }
                acc
            })
            .collect()
    }
}

/// Discretizes explicit `delta [L, C]`, `A [C, N]`, `B [L, N]`, `C [L, N]`.
pub fn discretize<T: Scalar>(delta: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>) -> Result<DiscretizedSsm<T>> {
    let dims = scan::check_dims(delta.shape(), delta.shape(), a.shape(), b.shape(), c.shape())?;
    delta.ensure_finite("timescale delta")?;
    let total = dims.len * dims.channels * dims.state;
    let mut a_bar = vec![T::zero(); total];
    let mut b_bar = vec![T::zero(); total];
    scan::discretize_into(delta.data(), a.data(), b.data(), dims, &mut a_bar, &mut b_bar);
    let shape = vec![dims.len, dims.channels, dims.state];
    Ok(DiscretizedSsm {
        a_bar: Tensor::from_parts(shape.clone(), a_bar),
        b_bar: Tensor::from_parts(shape, b_bar),
        c_proj: c.clone(),
    })
}

/// Timescales `softplus(x W_delta + bias) [L, C]` for a parameter source `x`.
pub fn timescales<T: Scalar>(x_param: &Tensor<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    check_seq(x_param, p.channels(), "timescales")?;
    let c = p.channels();
    let pre = kernels::linear_fwd(x_param.data(), p.w_delta.data(), Some(p.bias_delta.data()), c, c);
    Ok(Tensor::from_parts(x_param.shape().to_vec(), pre.into_iter().map(kernels::softplus).collect()))
}

/// Generates `(B, C, delta)` from `x_param` and discretizes.
pub fn generate_and_discretize<T: Scalar>(x_param: &Tensor<T>, p: &SsmParams<T>) -> Result<DiscretizedSsm<T>> {
    check_seq(x_param, p.channels(), "generate_and_discretize")?;
    let (c, n) = (p.channels(), p.state());
    let l = x_param.shape()[0];
    let b = kernels::linear_fwd(x_param.data(), p.w_b.data(), None, c, n);
    let cp = kernels::linear_fwd(x_param.data(), p.w_c.data(), None, c, n);
    let delta = timescales(x_param, p)?;
    discretize(
        &delta,
        &p.a,
        &Tensor::from_parts(vec![l, n], b),
        &Tensor::from_parts(vec![l, n], cp),
    )
}

fn check_seq<T: Scalar>(x: &Tensor<T>, channels: usize, op: &'static str) -> Result<()> {
    match *x.shape() {
        [_, c] if c == channels => Ok(()),
        _ => Err(Error::dim(op, x.shape(), &[0, channels])),
    }
}

fn check_scan_input<T: Scalar>(x: &Tensor<T>, d: &DiscretizedSsm<T>) -> Result<ScanDims> {
    let dims = d.dims();
    if x.shape() != [dims.len, dims.channels] {
        return Err(Error::dim("scan", x.shape(), d.a_bar.shape()));
    }
    Ok(dims)
}

/// Reference recurrence, one position at a time.
pub fn scan_sequential<T: Scalar>(x: &Tensor<T>, d: &DiscretizedSsm<T>) -> Result<Tensor<T>> {
    let dims = check_scan_input(x, d)?;
    let y = scan::recur(x.data(), d.a_bar.data(), d.b_bar.data(), d.c_proj.data(), dims, None);
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

/// Work-efficient parallel evaluation; agrees with [`scan_sequential`] up to
/// floating-point reassociation. Output is deterministic for a given length.
pub fn scan_parallel<T: Scalar>(x: &Tensor<T>, d: &DiscretizedSsm<T>) -> Result<Tensor<T>> {
    let dims = check_scan_input(x, d)?;
    let y = scan::recur_parallel(x.data(), d.a_bar.data(), d.b_bar.data(), d.c_proj.data(), dims);
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

/// Single-input SSM on plain tensors: parameters come from `x` itself.
pub fn ssm_forward<T: Scalar>(x: &Tensor<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    fssm_forward(x, x, p)
}

/// Dual-input SSM on plain tensors: parameters from `x_b`, scan over `x_a`.
pub fn fssm_forward<T: Scalar>(x_a: &Tensor<T>, x_b: &Tensor<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    if x_a.shape() != x_b.shape() {
        return Err(Error::dim("fssm", x_a.shape(), x_b.shape()));
    }
    let d = generate_and_discretize(x_b, p)?;
    scan_sequential(x_a, &d)
}

/// Which of `(B, C, delta)` the dual-input block draws from its second input.
/// Disabled entries fall back to the processed sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub b: bool,
    pub c: bool,
    pub delta: bool,
}

impl Interaction {
    pub const FULL: Self = Self { b: true, c: true, delta: true };
    pub const NONE: Self = Self { b: false, c: false, delta: false };

    /// All eight combinations, `NONE` first and `FULL` last.
    pub fn all() -> [Self; 8] {
        let mut out = [Self::NONE; 8];
        for (i, m) in out.iter_mut().enumerate() {
            *m = Self { b: i & 1 != 0, c: i & 2 != 0, delta: i & 4 != 0 };
        }
        out
    }
}

/// Trainable SSM parameters. `A` is stored as `a_log` with `A = -exp(a_log)`.
#[derive(Clone, Debug)]
pub struct SsmWeights {
    pub a_log: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_delta: ParamId,
    pub bias_delta: ParamId,
    pub channels: usize,
    pub state: usize,
}

/// Timescale range used to initialize `bias_delta`.
pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

impl SsmWeights {
    /// `A[c, n] = -(n + 1)`; `softplus(bias_delta)` log-uniform in `[DT_MIN, DT_MAX]`;
    /// projections Kaiming-uniform.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        state: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let a_log: Vec<f64> = (0..channels)
            .flat_map(|_| (0..state).map(|n| ((n + 1) as f64).ln()))
            .collect();
        let bias: Vec<f64> = (0..channels)
            .map(|_| {
                let u: f64 = rng.random();
                let dt = (DT_MIN.ln() + u * (DT_MAX.ln() - DT_MIN.ln())).exp();
                kernels::softplus_inverse(dt)
            })
            .collect();
        Ok(Self {
            a_log: store.add(format!("{prefix}.a_log"), Tensor::from_f64(&[channels, state], &a_log)?)?,
            w_b: store.add(format!("{prefix}.w_b"), kaiming_uniform(&[channels, state], channels, rng)?)?,
            w_c: store.add(format!("{prefix}.w_c"), kaiming_uniform(&[channels, state], channels, rng)?)?,
            w_delta: store.add(format!("{prefix}.w_delta"), kaiming_uniform(&[channels, channels], channels, rng)?)?,
            bias_delta: store.add(format!("{prefix}.bias_delta"), Tensor::from_f64(&[channels], &bias)?)?,
            channels,
            state,
        })
    }

    /// Materializes kernel-level parameters from the store.
    pub fn params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<SsmParams<T>> {
        SsmParams::new(
            store.value(self.a_log).map(|v| -v.exp()),
            store.value(self.w_b).clone(),
            store.value(self.w_c).clone(),
            store.value(self.w_delta).clone(),
            store.value(self.bias_delta).clone(),
        )
    }

    pub fn param_ids(&self) -> [ParamId; 5] {
        [self.a_log, self.w_b, self.w_c, self.w_delta, self.bias_delta]
    }
}

/// Differentiable single-input SSM block over `x [L, C]`.
pub fn ssm_block<T: Scalar>(g: &mut Graph<'_, T>, x: Var, w: &SsmWeights) -> Result<Var> {
    fssm_block(g, x, x, w)
}

/// Differentiable dual-input block: `(B, C, delta)` from `x_b`, scan over `x_a`.
pub fn fssm_block<T: Scalar>(g: &mut Graph<'_, T>, x_a: Var, x_b: Var, w: &SsmWeights) -> Result<Var> {
    fssm_block_with(g, x_a, x_b, w, Interaction::FULL)
}

pub fn fssm_block_with<T: Scalar>(
    g: &mut Graph<'_, T>,
    x_a: Var,
    x_b: Var,
    w: &SsmWeights,
    mode: Interaction,
) -> Result<Var> {
    fssm_block_ordered(g, x_a, x_b, w, mode, None)
}

/// [`fssm_block_with`] scanning the rows in `order`; see
/// [`Graph::selective_scan_ordered`].
pub fn fssm_block_ordered<T: Scalar>(
    g: &mut Graph<'_, T>,
    x_a: Var,
    x_b: Var,
    w: &SsmWeights,
    mode: Interaction,
    order: Option<Arc<Vec<usize>>>,
) -> Result<Var> {
    if g.shape(x_a) != g.shape(x_b) {
        return Err(Error::dim("fssm_block", g.shape(x_a), g.shape(x_b)));
    }
    let pick = |flag: bool| if flag { x_b } else { x_a };
    let w_b = g.param(w.w_b)?;
    let w_c = g.param(w.w_c)?;
    let w_delta = g.param(w.w_delta)?;
    let bias_delta = g.param(w.bias_delta)?;
    let a_log = g.param(w.a_log)?;

    let b = g.linear(pick(mode.b), w_b, None)?;
    let c = g.linear(pick(mode.c), w_c, None)?;
    let pre = g.linear(pick(mode.delta), w_delta, Some(bias_delta))?;
    let delta = g.softplus(pre)?;
    if !g.value(delta).all_finite() {
        return Err(Error::NonFinite("timescale delta".into()));
    }
    let a = g.neg_exp(a_log)?;
    g.selective_scan_ordered(x_a, delta, a, b, c, order)
}

/// Converts an arbitrary f64 to `T`; used by tests and tools.
pub fn scalar<T: Scalar>(v: f64) -> T {
    s(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn zero_timescale_gives_identity_transition() {
        let delta = Tensor::<f64>::zeros(&[3, 2]).unwrap();
        let a = t(&[2, 2], &[-1., -2., -3., -4.]);
        let b = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let c = Tensor::ones(&[3, 2]).unwrap();
        let d = discretize(&delta, &a, &b, &c).unwrap();
        assert!(d.a_bar.data().iter().all(|&v| v == 1.0));
        assert!(d.b_bar.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_form_discretization() {
        let ln2 = 2f64.ln();
        let d = discretize(&t(&[1, 1], &[ln2]), &t(&[1, 1], &[-1.]), &t(&[1, 1], &[3.]), &t(&[1, 1], &[1.])).unwrap();
        assert!((d.a_bar.data()[0] - 0.5).abs() < 1e-15);
        assert!((d.b_bar.data()[0] - 3.0 * ln2).abs() < 1e-15);
        assert!((d.b_bar.data()[0] - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn non_finite_timescale_rejected() {
        let r = discretize(&t(&[1, 1], &[f64::NAN]), &t(&[1, 1], &[-1.]), &t(&[1, 1], &[3.]), &t(&[1, 1], &[1.]));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    fn manual(len: usize, a_bar: f64, b_bar: f64, c: f64) -> DiscretizedSsm<f64> {
        DiscretizedSsm {
            a_bar: Tensor::full(&[len, 1, 1], a_bar).unwrap(),
            b_bar: Tensor::full(&[len, 1, 1], b_bar).unwrap(),
            c_proj: Tensor::full(&[len, 1], c).unwrap(),
        }
    }

    #[test]
    fn hand_recurrence() {
        let d = manual(3, 0.5, 1.0, 1.0);
        let y = scan_sequential(&Tensor::ones(&[3, 1]).unwrap(), &d).unwrap();
        assert_eq!(y.data(), &[1.0, 1.5, 1.75]);
        let yp = scan_parallel(&Tensor::ones(&[3, 1]).unwrap(), &d).unwrap();
        assert_eq!(yp.data(), &[1.0, 1.5, 1.75]);
    }

    #[test]
    fn memoryless_when_transition_is_zero() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let (l, c, n) = (4, 2, 3);
        let rnd = |rng: &mut Xoshiro256PlusPlus, k: usize| -> Vec<f64> { (0..k).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let d = DiscretizedSsm {
            a_bar: Tensor::zeros(&[l, c, n]).unwrap(),
            b_bar: Tensor::from_vec(&[l, c, n], rnd(&mut rng, l * c * n)).unwrap(),
            c_proj: Tensor::from_vec(&[l, n], rnd(&mut rng, l * n)).unwrap(),
        };
        let x = Tensor::from_vec(&[l, c], rnd(&mut rng, l * c)).unwrap();
        let y = scan_sequential(&x, &d).unwrap();
        for ti in 0..l {
            for ci in 0..c {
                let expect: f64 = (0..n)
                    .map(|k| d.c_proj.get(&[ti, k]) * d.b_bar.get(&[ti, ci, k]) * x.get(&[ti, ci]))
                    .sum();
                assert!((y.get(&[ti, ci]) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_input_zero_output() {
        let d = manual(5, 0.7, 2.0, -1.0);
        let y = scan_sequential(&Tensor::zeros(&[5, 1]).unwrap(), &d).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scan_state_streaming_matches_batch() {
        let d = manual(4, 0.25, 2.0, 3.0);
        let x = t(&[4, 1], &[1., -1., 0.5, 2.]);
        let batch = scan_sequential(&x, &d).unwrap();
        let mut st = ScanState::zeros(1, 1).unwrap();
        for ti in 0..4 {
            let y = st.step(&x.data()[ti..ti + 1], &d, ti);
            assert_eq!(y[0], batch.data()[ti]);
        }
    }

    #[test]
    fn params_reject_non_negative_a() {
        let r = SsmParams::new(
            t(&[1, 2], &[-1., 0.]),
            Tensor::zeros(&[1, 2]).unwrap(),
            Tensor::zeros(&[1, 2]).unwrap(),
            Tensor::zeros(&[1, 1]).unwrap(),
            Tensor::zeros(&[1]).unwrap(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn init_matches_conventions() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let w = SsmWeights::init(&mut store, "ssm", 6, 4, &mut rng).unwrap();
        let p = w.params(&store).unwrap();
        for c in 0..6 {
            for n in 0..4 {
                assert!((p.a.get(&[c, n]) + (n + 1) as f64).abs() < 1e-12);
            }
        }
        for &b in p.bias_delta.data() {
            let dt = kernels::softplus(b);
            assert!((DT_MIN - 1e-12..=DT_MAX + 1e-12).contains(&dt));
        }
    }

    #[test]
    fn mismatched_dual_inputs_rejected() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let w = SsmWeights::init(&mut store, "ssm", 2, 2, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(&[4, 2]).unwrap()).unwrap();
        let b = g.input(Tensor::zeros(&[5, 2]).unwrap()).unwrap();
        assert!(matches!(fssm_block(&mut g, a, b, &w), Err(Error::Dimension { .. })));
    }
}
