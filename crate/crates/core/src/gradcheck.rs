//! Finite-difference verification of analytic gradients.
//!
//! A [`Problem`] bundles an f64 parameter store, input tensors and a forward
//! closure. The scalar objective is `sum_o <R_o, out_o>` with fixed random
//! `R_o`, so every output element contributes. Each checked entry compares
//! the tape gradient against a central difference.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{Graph, Var};
use crate::blocks::{BiMambaWeights, FourDirMambaWeights, FusionMambaWeights};
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::network::{FusionNet, FusionNetConfig};
use crate::params::ParamStore;
use crate::ssm::{fssm_block, ssm_block, SsmWeights};
use crate::tensor::Tensor;

type Forward = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Vec<Var>> + Send + Sync;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Module {
    Linear,
    Conv1x1,
    LayerNorm,
    SsmBlock,
    FssmBlock,
    BidirectionalMamba,
    FourDirectionalMamba,
    FusionMambaBlock,
    Network,
}

impl Module {
    pub const ALL: [Module; 9] = [
        Module::Linear,
        Module::Conv1x1,
        Module::LayerNorm,
        Module::SsmBlock,
        Module::FssmBlock,
        Module::BidirectionalMamba,
        Module::FourDirectionalMamba,
        Module::FusionMambaBlock,
        Module::Network,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Module::Linear => "linear",
            Module::Conv1x1 => "conv1x1",
            Module::LayerNorm => "layer_norm",
            Module::SsmBlock => "ssm_block",
            Module::FssmBlock => "fssm_block",
            Module::BidirectionalMamba => "bidirectional_mamba",
            Module::FourDirectionalMamba => "four_directional_mamba",
            Module::FusionMambaBlock => "fusion_mamba_block",
            Module::Network => "network",
        }
    }
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Module::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown module `{s}` (expected one of {})", known.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is numerically zero are judged on absolute error.
    pub floor: f64,
    /// Entries checked per tensor; larger tensors are subsampled.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, floor: 1e-3, max_entries: 16, seed: 0 }
    }
}

impl GradCheckConfig {
    /// Defaults with a per-tensor budget sized to the module; the full
    /// network has hundreds of tensors and checks two entries of each.
    pub fn for_module(module: Module) -> Self {
        let max_entries = if module == Module::Network { 2 } else { 16 };
        Self { max_entries, ..Self::default() }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let d = (analytic - numeric).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Largest analytic magnitude among checked entries.
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub module: String,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err <= self.tolerance)
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorCheck> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(f, "  {} checked={} max_rel_err={:.3e}", t.name, t.checked, t.max_rel_err)?;
        }
        write!(
            f,
            "module={} tensors={} max_rel_err={:.3e} tol={:e} {}",
            self.module,
            self.tensors.len(),
            self.max_rel_err(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Differentiable function of named parameters and inputs.
pub struct Problem {
    pub name: String,
    pub store: ParamStore<f64>,
    pub inputs: Vec<(String, Tensor<f64>)>,
    forward: Box<Forward>,
    weights: Vec<Tensor<f64>>,
}

impl Problem {
    /// Runs the forward once to size the random objective weights.
    pub fn new(
        name: impl Into<String>,
        store: ParamStore<f64>,
        inputs: Vec<(String, Tensor<f64>)>,
        forward: Box<Forward>,
        seed: u64,
    ) -> Result<Self> {
        let mut p = Self { name: name.into(), store, inputs, forward, weights: Vec::new() };
        let shapes: Vec<Vec<usize>> = {
            let mut g = Graph::new(&p.store);
            let outs = p.run(&mut g)?;
            outs.iter().map(|&o| g.shape(o).to_vec()).collect()
        };
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x5EED);
        p.weights = shapes.iter().map(|s| uniform(s, 1.0, &mut rng)).collect::<Result<_>>()?;
        Ok(p)
    }

    fn run(&self, g: &mut Graph<'_, f64>) -> Result<Vec<Var>> {
        let vars = self.inputs.iter().map(|(_, t)| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
        (self.forward)(g, &vars)
    }

    pub fn objective(&self) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let outs = self.run(&mut g)?;
        Ok(outs
            .iter()
            .zip(&self.weights)
            .map(|(&o, r)| g.value(o).data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum())
    }

    /// Tape gradients of the objective: parameters in store order, then inputs.
    pub fn analytic(&self) -> Result<Vec<(String, Tensor<f64>)>> {
        let mut g = Graph::new(&self.store);
        let vars = self.inputs.iter().map(|(_, t)| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
        let outs = (self.forward)(&mut g, &vars)?;
        let mut loss = None;
        for (&o, r) in outs.iter().zip(&self.weights) {
            let d = g.dot(o, r)?;
            loss = Some(match loss {
                Some(l) => g.add(l, d)?,
                None => d,
            });
        }
        let loss = loss.ok_or_else(|| Error::Usage("forward produced no outputs".into()))?;
        let grads = g.backward(loss)?;
        let mut out: Vec<(String, Tensor<f64>)> = self
            .store
            .ids()
            .map(|id| Ok((self.store.name(id).to_string(), Tensor::zeros(self.store.value(id).shape())?)))
            .collect::<Result<_>>()?;
        for (id, t) in grads.params() {
            out[id.index()].1 = t.clone();
        }
        for ((name, t), &v) in self.inputs.iter().zip(&vars) {
            let gt = match grads.wrt(v) {
                Some(gt) => gt.clone(),
                None => Tensor::zeros(t.shape())?,
            };
            out.push((name.clone(), gt));
        }
        Ok(out)
    }

    fn entry_mut(&mut self, k: usize) -> &mut Tensor<f64> {
        let np = self.store.len();
        if k < np {
            let id = self.store.ids().nth(k).expect("index below store length");
            self.store.value_mut(id)
        } else {
            &mut self.inputs[k - np].1
        }
    }

    /// Central difference of the objective along one scalar of tensor `k`.
    fn numeric(&mut self, k: usize, i: usize, h: f64) -> Result<f64> {
        let orig = self.entry_mut(k).data()[i];
        self.entry_mut(k).data_mut()[i] = orig + h;
        let fp = self.objective();
        self.entry_mut(k).data_mut()[i] = orig - h;
        let fm = self.objective();
        self.entry_mut(k).data_mut()[i] = orig;
        Ok((fp? - fm?) / (2.0 * h))
    }

    /// Compares `analytic` (as returned by [`Problem::analytic`]) against
    /// central differences.
    pub fn compare(&mut self, analytic: &[(String, Tensor<f64>)], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
        let expected = self.store.len() + self.inputs.len();
        if analytic.len() != expected {
            return Err(Error::Usage(format!("expected {expected} gradient tensors, got {}", analytic.len())));
        }
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
        let mut tensors = Vec::with_capacity(expected);
        for (k, (name, grad)) in analytic.iter().enumerate() {
            let numel = grad.numel();
            let mut idx: Vec<usize> = if numel <= cfg.max_entries {
                (0..numel).collect()
            } else {
                sample(&mut rng, numel, cfg.max_entries).into_vec()
            };
            idx.sort_unstable();
            let mut check = TensorCheck { name: name.clone(), checked: idx.len(), max_rel_err: 0.0, max_abs_grad: 0.0 };
            for i in idx {
                let a = grad.data()[i];
                let n = self.numeric(k, i, cfg.step)?;
                let e = relative_error(a, n, cfg.floor);
                // a NaN sticks so the check fails
                if !check.max_rel_err.is_nan() && !(e <= check.max_rel_err) {
                    check.max_rel_err = e;
                }
                check.max_abs_grad = check.max_abs_grad.max(a.abs());
            }
            tensors.push(check);
        }
        Ok(GradCheckReport { module: self.name.clone(), tolerance: cfg.tolerance, tensors })
    }

    pub fn check(&mut self, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
        let analytic = self.analytic()?;
        self.compare(&analytic, cfg)
    }
}

fn uniform(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Result<Tensor<f64>> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_f64(shape, &v)
}

/// Adds `U(-scale, scale)` noise to every parameter so zero-initialized
/// projections do not hide upstream gradients.
fn jitter(store: &mut ParamStore<f64>, scale: f64, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Builds the standard check problem for `module`.
pub fn problem(module: Module, seed: u64) -> Result<Problem> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let (inputs, forward): (Vec<(String, Tensor<f64>)>, Box<Forward>) = match module {
        Module::Linear => {
            let l = Linear::init(&mut store, "linear", 5, 3, true, &mut rng)?;
            (vec![("x".into(), uniform(&[4, 5], 1.0, &mut rng)?)], Box::new(move |g, v| Ok(vec![l.forward(g, v[0])?])))
        }
        Module::Conv1x1 => {
            let l = Linear::init(&mut store, "conv1x1", 3, 5, true, &mut rng)?;
            (vec![("x".into(), uniform(&[4, 4, 3], 1.0, &mut rng)?)], Box::new(move |g, v| Ok(vec![l.forward(g, v[0])?])))
        }
        Module::LayerNorm => {
            let l = LayerNorm::init(&mut store, "norm", 6)?;
            (vec![("x".into(), uniform(&[3, 4, 6], 1.0, &mut rng)?)], Box::new(move |g, v| Ok(vec![l.forward(g, v[0])?])))
        }
        Module::SsmBlock => {
            let w = SsmWeights::init(&mut store, "ssm", 2, 4, &mut rng)?;
            (vec![("x".into(), uniform(&[16, 2], 1.0, &mut rng)?)], Box::new(move |g, v| Ok(vec![ssm_block(g, v[0], &w)?])))
        }
        Module::FssmBlock => {
            let w = SsmWeights::init(&mut store, "fssm", 2, 4, &mut rng)?;
            (
                vec![("x_a".into(), uniform(&[16, 2], 1.0, &mut rng)?), ("x_b".into(), uniform(&[16, 2], 1.0, &mut rng)?)],
                Box::new(move |g, v| Ok(vec![fssm_block(g, v[0], v[1], &w)?])),
            )
        }
        Module::BidirectionalMamba => {
            let w = BiMambaWeights::init(&mut store, "bi", 4, 4, &mut rng)?;
            (vec![("x".into(), uniform(&[8, 4], 1.0, &mut rng)?)], Box::new(move |g, v| Ok(vec![w.forward(g, v[0])?])))
        }
        Module::FourDirectionalMamba => {
            let w = FourDirMambaWeights::init(&mut store, "four", 4, 4, &mut rng)?;
            (vec![("f".into(), uniform(&[4, 4, 4], 1.0, &mut rng)?)], Box::new(move |g, v| Ok(vec![w.forward(g, v[0])?])))
        }
        Module::FusionMambaBlock => {
            let w = FusionMambaWeights::init(&mut store, "fusion", 4, 4, &mut rng)?;
            (
                vec![("f_a".into(), uniform(&[4, 4, 4], 1.0, &mut rng)?), ("f_b".into(), uniform(&[4, 4, 4], 1.0, &mut rng)?)],
                Box::new(move |g, v| {
                    let o = w.forward(g, v[0], v[1])?;
                    Ok(vec![o.fused, o.out_a, o.out_b])
                }),
            )
        }
        Module::Network => {
            let mut cfg = FusionNetConfig::new(4, 8, 4);
            cfg.init_seed = seed;
            let (net, s) = FusionNet::build::<f64>(cfg)?;
            store = s;
            let pan = uniform(&[16, 16, 1], 1.0, &mut rng)?.map(|v| 0.5 + 0.5 * v);
            let lr = uniform(&[4, 4, 4], 1.0, &mut rng)?.map(|v| 0.5 + 0.5 * v);
            (
                vec![("pan".into(), pan), ("lr".into(), lr)],
                Box::new(move |g, v| Ok(vec![net.forward(g, v[0], v[1])?.output])),
            )
        }
    };
    jitter(&mut store, 0.05, &mut rng);
    Problem::new(module.name(), store, inputs, forward, seed)
}

/// Checks `module` on its standard problem.
pub fn gradcheck(module: Module, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    problem(module, cfg.seed)?.check(cfg)
}
