//! Tape-based reverse-mode differentiation over a fixed operation set.
//!
//! A [`Graph`] records every operation in execution order together with
//! whatever the adjoint needs (normalized activations, argmax positions,
//! scan states). [`Graph::backward`] walks the tape in exact reverse order
//! and returns a [`Gradients`] bundle; parameter gradients are then folded
//! into a [`ParamStore`] with [`ParamStore::accumulate`].

pub mod kernels;

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::ssm::scan::{self, ScanDims, ScanSaved};
use crate::tensor::{s, Scalar, Tensor};
use kernels::{Conv3x3Dims, ResizeAxis};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Softplus,
    Sigmoid,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv3x3 { x: Var, w: Var, b: Option<Var>, dims: Conv3x3Dims },
    /// Output element `i` is input element `index[i]` (index is a permutation
    /// or a duplicating selection; the adjoint scatter-adds).
    Gather { x: Var, index: Arc<Vec<usize>> },
    GatherRows { x: Var, rows: Arc<Vec<usize>>, width: usize },
    Resize { x: Var, dims: (usize, usize, usize), ry: Arc<ResizeAxis>, rx: Arc<ResizeAxis> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Act { x: Var, kind: Activation },
    NegExp { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleChannels { x: Var, g: Var },
    AddChannels { x: Var, b: Var },
    Scale { x: Var, k: T },
    MaxPool { x: Var, argmax: Vec<usize> },
    Reshape { x: Var },
    Scan { x: Var, delta: Var, a: Var, b: Var, c: Var, dims: ScanDims, saved: ScanSaved<T> },
    AbsDiffSum { x: Var, target: Tensor<T> },
    Dot { x: Var, weights: Tensor<T> },
    Sum { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Result of a backward pass.
pub struct Gradients<T> {
    params: Vec<(ParamId, Tensor<T>)>,
    inputs: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to an input leaf, if it was reachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v)
    }

    /// Gradients of every parameter that appeared on the tape, in first-use order.
    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Adds a backward result into the gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in &grads.params {
            self.accumulate_grad(*id, g)?;
        }
        self.mark_grads_ready();
        Ok(())
    }
}

pub struct Graph<'p, T: Scalar> {
    store: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph whose parameter leaves are read from `store`.
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            backward_done: false,
        }
    }

    /// A graph with inputs only.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.backward_done {
            return Err(Error::Usage("graph already differentiated; build a new one".into()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Input)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::Usage("graph has no parameter store".into()))?;
        let value = store.value(id).clone();
        let v = self.push(value, Op::Param(id))?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    /// `x[.., Cin] @ w[Cin, Cout] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(Error::dim("linear", xs, ws));
        }
        let (cin, cout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim("linear bias", ws, self.shape(b)));
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = cout;
        let y = kernels::linear_fwd(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cin,
            cout,
        );
        self.push(Tensor::from_parts(shape, y), Op::Linear { x, w, b })
    }

    /// 3x3 convolution with zero padding 1 on an `[H, W, Cin]` input.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (h, wd, cin) = crate::tensor::hwc(self.shape(x), "conv3x3")?;
        let ws = self.shape(w);
        if ws.len() != 4 || ws[0] != 3 || ws[1] != 3 || ws[2] != cin {
            return Err(Error::dim("conv3x3", self.shape(x), ws));
        }
        let cout = ws[3];
        if stride == 0 || (stride == 2 && (h % 2 != 0 || wd % 2 != 0)) {
            return Err(Error::dim("conv3x3 stride", self.shape(x), &[stride]));
        }
        let dims = Conv3x3Dims { h, w: wd, cin, cout, stride };
        let (ho, wo) = dims.out_hw();
        let y = kernels::conv3x3_fwd(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            dims,
        );
        self.push(Tensor::from_parts(vec![ho, wo, cout], y), Op::Conv3x3 { x, w, b, dims })
    }

    /// Element gather with an arbitrary output shape.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if index.iter().any(|&i| i >= n) || shape.iter().product::<usize>() != index.len() {
            return Err(Error::dim("gather", self.shape(x), shape));
        }
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::from_vec(shape, data)?;
        self.push(t, Op::Gather { x, index })
    }

    /// Reorders the rows of an `[L, C]` (or `[.., C]`) tensor: output row `i`
    /// is input row `rows[i]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize], shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let c = src.last_dim();
        let n_rows = if c == 0 { 0 } else { src.numel() / c };
        if rows.iter().any(|&r| r >= n_rows) || shape.iter().product::<usize>() != rows.len() * c {
            return Err(Error::dim("gather_rows", self.shape(x), shape));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(&src.data()[r * c..r * c + c]);
        }
        let t = Tensor::from_vec(shape, data)?;
        self.push(t, Op::GatherRows { x, rows: Arc::new(rows.to_vec()), width: c })
    }

    /// Depth-to-space by a factor of two: `[H, W, 4C] -> [2H, 2W, C]`.
    pub fn pixel_shuffle(&mut self, x: Var) -> Result<Var> {
        let (h, w, c4) = crate::tensor::hwc(self.shape(x), "pixel_shuffle")?;
        if c4 % 4 != 0 {
            return Err(Error::dim("pixel_shuffle", self.shape(x), &[4]));
        }
        let c = c4 / 4;
        let index = kernels::pixel_shuffle_index(h, w, c);
        self.gather(x, Arc::new(index), &[2 * h, 2 * w, c])
    }

    /// Bicubic (Catmull-Rom) resize of `[H, W, C]` by an integer factor.
    pub fn resize_bicubic(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (h, w, c) = crate::tensor::hwc(self.shape(x), "resize_bicubic")?;
        if factor == 0 {
            return Err(Error::Usage("resize factor must be positive".into()));
        }
        let ry = Arc::new(ResizeAxis::bicubic(h, factor));
        let rx = Arc::new(ResizeAxis::bicubic(w, factor));
        let y = kernels::resize_fwd(self.value(x).data(), h, w, c, &ry, &rx);
        self.push(
            Tensor::from_parts(vec![h * factor, w * factor, c], y),
            Op::Resize { x, dims: (h, w, c), ry, rx },
        )
    }

    /// Layer normalization over the trailing channel axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Usage("layer_norm eps must be positive".into()));
        }
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (y, xhat, rstd) = kernels::layer_norm_fwd(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            s(eps),
        );
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, y), Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let v = self.value(x);
        let y = match kind {
            Activation::Silu => v.map(kernels::silu),
            Activation::Softplus => v.map(kernels::softplus),
            Activation::Sigmoid => v.map(kernels::sigmoid),
        };
        self.push(y, Op::Act { x, kind })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// `-exp(x)`, used to keep state matrices strictly negative.
    pub fn neg_exp(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| -v.exp());
        self.push(y, Op::NegExp { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        self.push(y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "mul", |p, q| p * q)?;
        self.push(y, Op::Mul { a, b })
    }

    /// Multiplies every row of `x[.., C]` by the vector `g[C]`.
    pub fn scale_channels(&mut self, x: Var, g: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(g).numel() != c {
            return Err(Error::dim("scale_channels", self.shape(x), self.shape(g)));
        }
        let gv = self.value(g).data().to_vec();
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_exact_mut(c) {
            for (v, &k) in row.iter_mut().zip(&gv) {
                *v = *v * k;
            }
        }
        self.push(y, Op::ScaleChannels { x, g })
    }

    /// Adds the vector `b[C]` to every row of `x[.., C]`.
    pub fn add_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(b).numel() != c {
            return Err(Error::dim("add_channels", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).data().to_vec();
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_exact_mut(c) {
            for (v, &k) in row.iter_mut().zip(&bv) {
                *v = *v + k;
            }
        }
        self.push(y, Op::AddChannels { x, b })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let k: T = s(k);
        let y = self.value(x).scale(k);
        self.push(y, Op::Scale { x, k })
    }

    /// Per-channel spatial maximum of `[H, W, S]`, giving `[1, 1, S]`.
    /// Ties resolve to the first position in row-major order.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (_, _, c) = crate::tensor::hwc(self.shape(x), "global_max_pool")?;
        let data = self.value(x).data();
        let mut best = data[..c].to_vec();
        let mut argmax: Vec<usize> = (0..c).collect();
        for (p, px) in data.chunks_exact(c).enumerate().skip(1) {
            for ch in 0..c {
                if px[ch] > best[ch] {
                    best[ch] = px[ch];
                    argmax[ch] = p * c + ch;
                }
            }
        }
        self.push(Tensor::from_parts(vec![1, 1, c], best), Op::MaxPool { x, argmax })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        self.push(y, Op::Reshape { x })
    }

    /// Discretizes and runs the selective scan.
    ///
    /// `x`, `delta`: `[L, C]`; `a`: `[C, N]`; `b`, `c`: `[L, N]`. Returns `[L, C]`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        self.selective_scan_ordered(x, delta, a, b, c, None)
    }

    /// Selective scan that visits rows `order[0], order[1], ...` of `[L, C]`
    /// inputs stored in natural order; output row `r` belongs to input row `r`.
    /// Equivalent to gathering the rows, scanning, and scattering back.
    pub fn selective_scan_ordered(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        order: Option<Arc<Vec<usize>>>,
    ) -> Result<Var> {
        let dims = scan::check_dims(self.shape(x), self.shape(delta), self.shape(a), self.shape(b), self.shape(c))?;
        if let Some(o) = &order {
            let mut seen = vec![false; dims.len];
            let ok = o.len() == dims.len && o.iter().all(|&r| r < dims.len && !std::mem::replace(&mut seen[r], true));
            if !ok {
                return Err(Error::Usage(format!("scan order is not a permutation of 0..{}", dims.len)));
            }
        }
        let (y, saved) = scan::forward_saving(
            self.value(x).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            dims,
            order,
        );
        self.push(
            Tensor::from_parts(vec![dims.len, dims.channels], y),
            Op::Scan { x, delta, a, b, c, dims, saved },
        )
    }

    /// `sum |x - target|` as a one-element tensor.
    pub fn abs_diff_sum(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let xs = self.value(x);
        if xs.shape() != target.shape() {
            return Err(Error::dim("abs_diff_sum", xs.shape(), target.shape()));
        }
        let v: T = xs.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum();
        self.push(Tensor::scalar(v), Op::AbsDiffSum { x, target: target.clone() })
    }

    /// `sum x * weights` as a one-element tensor.
    pub fn dot(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let xs = self.value(x);
        if xs.shape() != weights.shape() {
            return Err(Error::dim("dot", xs.shape(), weights.shape()));
        }
        let v: T = xs.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        self.push(Tensor::scalar(v), Op::Dot { x, weights: weights.clone() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).sum();
        self.push(Tensor::scalar(v), Op::Sum { x })
    }

    /// Runs the adjoint sweep from a one-element `loss`.
    ///
    /// A graph may be differentiated once; a second call is a usage error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::Usage("backward already called on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "loss must be a single element, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::from_parts(self.value(loss).shape().to_vec(), vec![T::one()]));

        let mut params = Vec::new();
        let mut inputs = HashMap::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(gy) = grads[i].take() else {
                match node.op {
                    Op::Param(id) => params.push((id, node.value.zeros_like())),
                    _ => {}
                }
                continue;
            };
            match &node.op {
                Op::Input => {
                    inputs.insert(Var(i), gy);
                }
                Op::Param(id) => params.push((*id, gy)),
                op => self.node_backward(op, gy, &mut grads),
            }
        }
        // first-use order
        params.reverse();
        Ok(Gradients { params, inputs })
    }

    fn node_backward(&self, op: &Op<T>, mut gy: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::Linear { x, w, b } => {
                let (cin, cout) = (val(*w).shape()[0], val(*w).shape()[1]);
                let mut gx = val(*x).zeros_like();
                let mut gw = val(*w).zeros_like();
                let mut gb = b.map(|b| val(b).zeros_like());
                kernels::linear_bwd(
                    val(*x).data(),
                    val(*w).data(),
                    gy.data(),
                    cin,
                    cout,
                    Some(gx.data_mut()),
                    Some(gw.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                add_grad(grads, *x, gx);
                add_grad(grads, *w, gw);
                if let (Some(b), Some(gb)) = (b, gb) {
                    add_grad(grads, *b, gb);
                }
            }
            Op::Conv3x3 { x, w, b, dims } => {
                let mut gx = val(*x).zeros_like();
                let mut gw = val(*w).zeros_like();
                let mut gb = b.map(|b| val(b).zeros_like());
                kernels::conv3x3_bwd(
                    val(*x).data(),
                    val(*w).data(),
                    gy.data(),
                    *dims,
                    Some(gx.data_mut()),
                    Some(gw.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                add_grad(grads, *x, gx);
                add_grad(grads, *w, gw);
                if let (Some(b), Some(gb)) = (b, gb) {
                    add_grad(grads, *b, gb);
                }
            }
            Op::Gather { x, index } => {
                let mut gx = val(*x).zeros_like();
                let d = gx.data_mut();
                for (&i, &g) in index.iter().zip(gy.data()) {
                    d[i] = d[i] + g;
                }
                add_grad(grads, *x, gx);
            }
            Op::GatherRows { x, rows, width } => {
                let c = *width;
                let mut gx = val(*x).zeros_like();
                let d = gx.data_mut();
                for (&r, g) in rows.iter().zip(gy.data().chunks_exact(c)) {
                    for (o, &v) in d[r * c..r * c + c].iter_mut().zip(g) {
                        *o = *o + v;
                    }
                }
                add_grad(grads, *x, gx);
            }
            Op::Resize { x, dims, ry, rx } => {
                let mut gx = val(*x).zeros_like();
                kernels::resize_bwd(gy.data(), dims.0, dims.1, dims.2, ry, rx, gx.data_mut());
                add_grad(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let mut gx = val(*x).zeros_like();
                let mut gg = val(*gamma).zeros_like();
                let mut gb = val(*beta).zeros_like();
                kernels::layer_norm_bwd(
                    gy.data(),
                    xhat,
                    rstd,
                    val(*gamma).data(),
                    Some(gx.data_mut()),
                    Some(gg.data_mut()),
                    Some(gb.data_mut()),
                );
                add_grad(grads, *x, gx);
                add_grad(grads, *gamma, gg);
                add_grad(grads, *beta, gb);
            }
            Op::Act { x, kind } => {
                fn apply<T: Scalar>(gy: &mut [T], x: &[T], d: impl Fn(T) -> T) {
                    for (g, &v) in gy.iter_mut().zip(x) {
                        *g = *g * d(v);
                    }
                }
                let xv = val(*x).data();
                match kind {
                    Activation::Silu => apply(gy.data_mut(), xv, kernels::silu_grad),
                    Activation::Softplus => apply(gy.data_mut(), xv, kernels::softplus_grad),
                    Activation::Sigmoid => apply(gy.data_mut(), xv, |v| {
                        let sg = kernels::sigmoid(v);
                        sg * (T::one() - sg)
                    }),
                }
                add_grad(grads, *x, gy);
            }
            Op::NegExp { x } => {
                for (g, &v) in gy.data_mut().iter_mut().zip(val(*x).data()) {
                    *g = -*g * v.exp();
                }
                add_grad(grads, *x, gy);
            }
            Op::Add { a, b } => {
                add_grad(grads, *a, gy.clone());
                add_grad(grads, *b, gy);
            }
            Op::Mul { a, b } => {
                let gb = gy.zip_map(val(*a), "mul", |g, p| g * p).expect("same shape");
                for (g, &q) in gy.data_mut().iter_mut().zip(val(*b).data()) {
                    *g = *g * q;
                }
                add_grad(grads, *a, gy);
                add_grad(grads, *b, gb);
            }
            Op::ScaleChannels { x, g } => {
                let c = val(*x).last_dim();
                let gv = val(*g).data();
                let mut gx = gy;
                let mut gg = val(*g).zeros_like();
                for (row, xr) in gx.data_mut().chunks_exact_mut(c).zip(val(*x).data().chunks_exact(c)) {
                    for ch in 0..c {
                        let d = gg.data_mut();
                        d[ch] = d[ch] + row[ch] * xr[ch];
                        row[ch] = row[ch] * gv[ch];
                    }
                }
                add_grad(grads, *x, gx);
                add_grad(grads, *g, gg);
            }
            Op::AddChannels { x, b } => {
                let c = val(*x).last_dim();
                let mut gb = val(*b).zeros_like();
                for row in gy.data().chunks_exact(c) {
                    for (d, &g) in gb.data_mut().iter_mut().zip(row) {
                        *d = *d + g;
                    }
                }
                add_grad(grads, *x, gy);
                add_grad(grads, *b, gb);
            }
            Op::Scale { x, k } => add_grad(grads, *x, gy.scale(*k)),
            Op::MaxPool { x, argmax } => {
                let mut gx = val(*x).zeros_like();
                let d = gx.data_mut();
                for (&i, &g) in argmax.iter().zip(gy.data()) {
                    d[i] = d[i] + g;
                }
                add_grad(grads, *x, gx);
            }
            Op::Reshape { x } => {
                let g = Tensor::from_parts(val(*x).shape().to_vec(), gy.into_data());
                add_grad(grads, *x, g);
            }
            Op::Scan { x, delta, a, b, c, dims, saved } => {
                let g = scan::backward(
                    val(*x).data(),
                    val(*delta).data(),
                    val(*a).data(),
                    val(*b).data(),
                    val(*c).data(),
                    saved,
                    gy.data(),
                    *dims,
                );
                add_grad(grads, *x, Tensor::from_parts(val(*x).shape().to_vec(), g.x));
                add_grad(grads, *delta, Tensor::from_parts(val(*delta).shape().to_vec(), g.delta));
                add_grad(grads, *a, Tensor::from_parts(val(*a).shape().to_vec(), g.a));
                add_grad(grads, *b, Tensor::from_parts(val(*b).shape().to_vec(), g.b));
                add_grad(grads, *c, Tensor::from_parts(val(*c).shape().to_vec(), g.c));
            }
            Op::AbsDiffSum { x, target } => {
                let g0 = gy.data()[0];
                let gx = val(*x)
                    .zip_map(target, "abs_diff_sum", |v, t| {
                        if v > t {
                            g0
                        } else if v < t {
                            -g0
                        } else {
                            T::zero()
                        }
                    })
                    .expect("same shape");
                add_grad(grads, *x, gx);
            }
            Op::Dot { x, weights } => {
                add_grad(grads, *x, weights.scale(gy.data()[0]));
            }
            Op::Sum { x } => {
                let g0 = gy.data()[0];
                let gx = val(*x).map(|_| g0);
                add_grad(grads, *x, gx);
            }
        }
    }
}

fn add_grad<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::<f64>::detached();
        let x = g.input(t(&[1, 2], &[1., 2.])).unwrap();
        let w = g.input(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let y = g.linear(x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x = g.input(t(&[1, 2], &[1., 1.])).unwrap();
        let w = g.input(t(&[2, 1], &[2., 3.])).unwrap();
        let b = g.input(t(&[1], &[1.])).unwrap();
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);

        let x = g.input(t(&[1, 2], &[0., 0.])).unwrap();
        let w = g.input(t(&[2, 2], &[0.3, -2., 7., 1.])).unwrap();
        let b = g.input(t(&[2], &[5., 5.])).unwrap();
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 5.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::detached();
        let x = g.input(Tensor::zeros(&[3, 2]).unwrap()).unwrap();
        let w = g.input(Tensor::zeros(&[3, 4]).unwrap()).unwrap();
        let err = g.linear(x, w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 2]") && msg.contains("[3, 4]"), "{msg}");
    }

    #[test]
    fn conv1x1_examples() {
        let mut g = Graph::<f64>::detached();
        let x = g.input(Tensor::ones(&[2, 2, 1]).unwrap()).unwrap();
        let w = g.input(t(&[1, 1], &[3.])).unwrap();
        let y = g.linear(x, w, None).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 1]);
        assert!(g.value(y).data().iter().all(|&v| v == 3.0));

        let x = g.input(t(&[1, 2, 2], &[5., 2., -1., 4.])).unwrap();
        let w = g.input(t(&[2, 1], &[1., -1.])).unwrap();
        let y = g.linear(x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -5.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::detached();
        let x = g.input(t(&[1, 3], &[4., 4., 4.])).unwrap();
        let gamma = g.input(Tensor::ones(&[3]).unwrap()).unwrap();
        let beta = g.input(Tensor::zeros(&[3]).unwrap()).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.input(t(&[1, 2], &[1., -1.])).unwrap();
        let gamma = g.input(Tensor::ones(&[2]).unwrap()).unwrap();
        let beta = g.input(Tensor::zeros(&[2]).unwrap()).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-9 && (v[1] + 1.0).abs() < 1e-9);
        assert!(g.layer_norm(x, gamma, beta, 0.0).is_err());
    }

    #[test]
    fn activation_examples() {
        let mut g = Graph::<f64>::detached();
        let x = g.input(t(&[3], &[0., 0., 50.])).unwrap();
        let si = g.silu(x).unwrap();
        let sp = g.softplus(x).unwrap();
        assert_eq!(g.value(si).data()[0], 0.0);
        assert!((g.value(sp).data()[0] - 2f64.ln()).abs() < 1e-15);
        assert!((g.value(sp).data()[2] - 50.0).abs() < 1e-9);
    }

    #[test]
    fn max_pool_examples() {
        let mut g = Graph::<f64>::detached();
        let x = g.input(t(&[2, 2, 1], &[1., 2., 3., 4.])).unwrap();
        let y = g.global_max_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let x = g.input(t(&[2, 2, 2], &[1., 9., 7., 2., 3., 2., 7., 8.])).unwrap();
        let y = g.global_max_pool(x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2]);
        assert_eq!(g.value(y).data(), &[7.0, 9.0]);
        // tie at positions 1 and 3 in channel 0 goes to the first
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0., 1., 1., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn sum_of_params_gives_unit_gradients() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", t(&[3], &[0.5, -1., 2.])).unwrap();
        let q = store.add("q", t(&[2], &[1., 1.])).unwrap();
        let unused = store.add("unused", t(&[2], &[1., 1.])).unwrap();
        let mut g = Graph::new(&store);
        let pv = g.param(p).unwrap();
        let qv = g.param(q).unwrap();
        let s1 = g.sum(pv).unwrap();
        let s2 = g.sum(qv).unwrap();
        let l = g.add(s1, s2).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(g.backward(l).is_err(), "second backward must fail");
        drop(g);
        store.accumulate(&grads).unwrap();
        assert!(store.grad(p).data().iter().all(|&v| v == 1.0));
        assert!(store.grad(q).data().iter().all(|&v| v == 1.0));
        assert!(store.grad(unused).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bicubic_preserves_constants() {
        let mut g = Graph::<f64>::detached();
        let x = g.input(Tensor::full(&[3, 5, 2], 0.37).unwrap()).unwrap();
        let y = g.resize_bicubic(x, 2).unwrap();
        assert_eq!(g.shape(y), &[6, 10, 2]);
        assert!(g.value(y).data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn shape_contracts_for_resampling() {
        let mut g = Graph::<f64>::detached();
        let x = g.input(Tensor::ones(&[4, 4, 3]).unwrap()).unwrap();
        let w = g.input(Tensor::ones(&[3, 3, 3, 5]).unwrap()).unwrap();
        let y = g.conv3x3(x, w, None, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 5]);
        let odd = g.input(Tensor::ones(&[5, 4, 3]).unwrap()).unwrap();
        assert!(g.conv3x3(odd, w, None, 2).is_err());
        let z = g.input(Tensor::ones(&[2, 2, 8]).unwrap()).unwrap();
        let u = g.pixel_shuffle(z).unwrap();
        assert_eq!(g.shape(u), &[4, 4, 2]);
    }
}
