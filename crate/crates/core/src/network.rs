//! The full fusion network: two U-shaped feature branches (PAN and
//! spectral), a combination branch of fusion blocks, channel attention over
//! the spectral axis, and an output head with a global residual.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{Graph, Var};
use crate::blocks::{BiMambaWeights, FourDirMambaWeights, FusionMambaWeights};
use crate::error::{Error, Result};
use crate::layers::{Conv3x3, Linear};
use crate::params::ParamStore;
use crate::tensor::{hwc, Scalar, Tensor};

/// Spatial ratio between the PAN and the low-resolution input.
pub const SCALE: usize = 4;
pub const STAGES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleKind {
    /// 1x1 conv to four times the channels, then depth-to-space.
    Shuffle,
    /// Bicubic x2, then 1x1 conv.
    Bicubic,
}

impl fmt::Display for UpsampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpsampleKind::Shuffle => "shuffle",
            UpsampleKind::Bicubic => "bicubic",
        })
    }
}

impl FromStr for UpsampleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shuffle" => Ok(UpsampleKind::Shuffle),
            "bicubic" => Ok(UpsampleKind::Bicubic),
            _ => Err(Error::Config(format!("unknown upsample kind {s:?} (expected shuffle or bicubic)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WidthSchedule {
    /// `[C, 2C, 4C, 2C, C]`
    Doubling,
    /// `C` at every stage.
    Constant,
}

/// Structural switches for ablation runs. All `true` is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// When false every stage runs at full resolution.
    pub u_shape: bool,
    /// Four-directional blocks on the PAN branch.
    pub spatial_branch: bool,
    /// Four-directional blocks on the spectral branch.
    pub spectral_branch: bool,
    /// Separate running fusion state; when false the fusion output is added
    /// into the spectral branch instead.
    pub combination_branch: bool,
    pub mca: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { u_shape: true, spatial_branch: true, spectral_branch: true, combination_branch: true, mca: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionNetConfig {
    pub bands: usize,
    pub channels: usize,
    pub state: usize,
    pub upsample: UpsampleKind,
    pub widths: WidthSchedule,
    pub ablation: Ablation,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl FusionNetConfig {
    pub fn new(bands: usize, channels: usize, state: usize) -> Self {
        Self {
            bands,
            channels,
            state,
            upsample: UpsampleKind::Shuffle,
            widths: WidthSchedule::Doubling,
            ablation: Ablation::default(),
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.channels == 0 || self.state == 0 {
            return Err(Error::Config("bands, channels and state size must be positive".into()));
        }
        Ok(())
    }

    /// `(width, downsampling divisor)` per stage.
    pub fn stage_plan(&self) -> [(usize, usize); STAGES] {
        let c = self.channels;
        let widths = match self.widths {
            WidthSchedule::Doubling if self.ablation.u_shape => [c, 2 * c, 4 * c, 2 * c, c],
            _ => [c; STAGES],
        };
        let divs = if self.ablation.u_shape { [1, 2, 4, 2, 1] } else { [1; STAGES] };
        std::array::from_fn(|i| (widths[i], divs[i]))
    }

    /// Plain `key=value` lines describing the architecture.
    pub fn to_manifest(&self) -> BTreeMap<String, String> {
        let a = &self.ablation;
        let mut m = BTreeMap::new();
        m.insert("bands".into(), self.bands.to_string());
        m.insert("channels".into(), self.channels.to_string());
        m.insert("state_size".into(), self.state.to_string());
        m.insert("upsample".into(), self.upsample.to_string());
        m.insert("widths".into(), match self.widths {
            WidthSchedule::Doubling => "doubling".into(),
            WidthSchedule::Constant => "constant".into(),
        });
        m.insert("u_shape".into(), a.u_shape.to_string());
        m.insert("spatial_branch".into(), a.spatial_branch.to_string());
        m.insert("spectral_branch".into(), a.spectral_branch.to_string());
        m.insert("combination_branch".into(), a.combination_branch.to_string());
        m.insert("mca".into(), a.mca.to_string());
        m.insert("init_seed".into(), self.init_seed.to_string());
        m
    }

    pub fn from_manifest(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(m: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str> {
            m.get(k).map(String::as_str).ok_or_else(|| Error::Config(format!("manifest missing key {k}")))
        }
        fn parse<V: FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<V> {
            get(m, k)?.parse().map_err(|_| Error::Config(format!("manifest key {k} has invalid value")))
        }
        let widths = match get(m, "widths")? {
            "doubling" => WidthSchedule::Doubling,
            "constant" => WidthSchedule::Constant,
            other => return Err(Error::Config(format!("unknown width schedule {other:?}"))),
        };
        let cfg = Self {
            bands: parse(m, "bands")?,
            channels: parse(m, "channels")?,
            state: parse(m, "state_size")?,
            upsample: get(m, "upsample")?.parse()?,
            widths,
            ablation: Ablation {
                u_shape: parse(m, "u_shape")?,
                spatial_branch: parse(m, "spatial_branch")?,
                spectral_branch: parse(m, "spectral_branch")?,
                combination_branch: parse(m, "combination_branch")?,
                mca: parse(m, "mca")?,
            },
            init_seed: parse(m, "init_seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Changes resolution and/or width between consecutive stages.
#[derive(Clone, Debug)]
pub enum Resampler {
    Identity,
    Down(Conv3x3),
    UpShuffle(Linear),
    UpBicubic(Linear),
    Project(Linear),
}

impl Resampler {
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        (cin, din): (usize, usize),
        (cout, dout): (usize, usize),
        kind: UpsampleKind,
        rng: &mut Xoshiro256PlusPlus,
    ) -> Result<Self> {
        Ok(if dout > din {
            Resampler::Down(Conv3x3::init(store, name, cin, cout, 2, rng)?)
        } else if dout < din {
            match kind {
                UpsampleKind::Shuffle => Resampler::UpShuffle(Linear::init(store, name, cin, 4 * cout, true, rng)?),
                UpsampleKind::Bicubic => Resampler::UpBicubic(Linear::init(store, name, cin, cout, true, rng)?),
            }
        } else if cin != cout {
            Resampler::Project(Linear::init(store, name, cin, cout, true, rng)?)
        } else {
            Resampler::Identity
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self {
            Resampler::Identity => Ok(x),
            Resampler::Down(conv) => conv.forward(g, x),
            Resampler::UpShuffle(proj) => {
                let y = proj.forward(g, x)?;
                g.pixel_shuffle(y)
            }
            Resampler::UpBicubic(proj) => {
                let y = g.resize_bicubic(x, 2)?;
                proj.forward(g, y)
            }
            Resampler::Project(proj) => proj.forward(g, x),
        }
    }
}

/// Channel attention over the spectral axis with a bidirectional Mamba bottleneck.
#[derive(Clone, Debug)]
pub struct McaWeights {
    pub fc_in: Linear,
    pub bimamba: BiMambaWeights,
    pub fc_out: Linear,
}

impl McaWeights {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize, n: usize, rng: &mut Xoshiro256PlusPlus) -> Result<Self> {
        Ok(Self {
            fc_in: Linear::init(store, &format!("{prefix}.fc_in"), 1, c, true, rng)?,
            bimamba: BiMambaWeights::init(store, &format!("{prefix}.bimamba"), c, n, rng)?,
            fc_out: Linear::init(store, &format!("{prefix}.fc_out"), c, 1, true, rng)?,
        })
    }

    /// Per-band gate in `(0, 1)` of shape `[S]` computed from `[H, W, S]`.
    pub fn gate<T: Scalar>(&self, g: &mut Graph<'_, T>, m_up: Var) -> Result<Var> {
        let (_, _, bands) = hwc(g.shape(m_up), "mca")?;
        let pooled = g.global_max_pool(m_up)?;
        let seq = g.reshape(pooled, &[bands, 1])?;
        let wide = self.fc_in.forward(g, seq)?;
        let mixed = self.bimamba.forward(g, wide)?;
        let logits = self.fc_out.forward(g, mixed)?;
        let gate = g.sigmoid(logits)?;
        g.reshape(gate, &[bands])
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub spatial: Option<FourDirMambaWeights>,
    pub spectral: Option<FourDirMambaWeights>,
    pub fusion: FusionMambaWeights,
}

#[derive(Clone, Debug)]
pub struct FusionNet {
    pub config: FusionNetConfig,
    pub stem_pan: Conv3x3,
    pub stem_spec: Conv3x3,
    pub stages: Vec<Stage>,
    /// `resample[k]` maps the output of stage `k` to the input of stage `k + 1`,
    /// one per branch `(a, b, c)`; `c` is absent without a combination branch.
    pub resample: Vec<(Resampler, Resampler, Option<Resampler>)>,
    pub mca: Option<McaWeights>,
    pub head: Linear,
}

/// Feature maps produced by one stage.
#[derive(Clone, Copy, Debug)]
pub struct StageOutputs {
    pub spatial: Var,
    pub spectral: Var,
    pub combined: Option<Var>,
}

/// Every intermediate of interest from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub output: Var,
    pub upsampled: Var,
    pub head: Var,
    pub gate: Option<Var>,
    pub stages: Vec<StageOutputs>,
}

/// Skip sources: stage index `k` receives the output of stage `SKIPS[k]`.
const SKIPS: [Option<usize>; STAGES] = [None, None, None, Some(1), Some(0)];

impl FusionNet {
    /// Builds the network and registers its parameters in a fresh store.
    pub fn build<T: Scalar>(config: FusionNetConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.init_seed);
        let (c, n, s) = (config.channels, config.state, config.bands);
        let ab = config.ablation;
        let plan = config.stage_plan();

        let stem_pan = Conv3x3::init(&mut store, "stem_pan", 1, c, 1, &mut rng)?;
        let stem_spec = Conv3x3::init(&mut store, "stem_spec", s, c, 1, &mut rng)?;
        let mut stages = Vec::with_capacity(STAGES);
        let mut resample = Vec::with_capacity(STAGES - 1);
        for (i, &(w, _)) in plan.iter().enumerate() {
            let p = format!("stage{}", i + 1);
            let spatial = if ab.spatial_branch {
                Some(FourDirMambaWeights::init(&mut store, &format!("{p}.spatial"), w, n, &mut rng)?)
            } else {
                None
            };
            let spectral = if ab.spectral_branch {
                Some(FourDirMambaWeights::init(&mut store, &format!("{p}.spectral"), w, n, &mut rng)?)
            } else {
                None
            };
            let fusion = FusionMambaWeights::init(&mut store, &format!("{p}.fusion"), w, n, &mut rng)?;
            stages.push(Stage { spatial, spectral, fusion });
            if i + 1 < STAGES {
                let (from, to) = (plan[i], plan[i + 1]);
                let k = config.upsample;
                let ra = Resampler::init(&mut store, &format!("resample_a{}", i + 1), from, to, k, &mut rng)?;
                let rb = Resampler::init(&mut store, &format!("resample_b{}", i + 1), from, to, k, &mut rng)?;
                let rc = if ab.combination_branch {
                    Some(Resampler::init(&mut store, &format!("resample_c{}", i + 1), from, to, k, &mut rng)?)
                } else {
                    None
                };
                resample.push((ra, rb, rc));
            }
        }
        let mca = if ab.mca { Some(McaWeights::init(&mut store, "mca", c, n, &mut rng)?) } else { None };
        let head = Linear::init(&mut store, "head", c, s, true, &mut rng)?;
        // start at the upsampled input; a random head drives the MCA gate to zero
        head.zero(&mut store);
        Ok((Self { config, stem_pan, stem_spec, stages, resample, mca, head }, store))
    }

    /// Checks `P [H, W, 1]` against `M [H/4, W/4, S]`.
    pub fn check_inputs(&self, pan: &[usize], lr: &[usize]) -> Result<(usize, usize)> {
        let (h, w, pc) = hwc(pan, "fusion input PAN")?;
        if pc != 1 {
            return Err(Error::Shape { shape: pan.to_vec(), reason: "PAN must have one channel".into() });
        }
        if h % SCALE != 0 || w % SCALE != 0 {
            return Err(Error::Config(format!("PAN size {h}x{w} must be divisible by {SCALE}")));
        }
        let (lh, lw, s) = hwc(lr, "fusion input LR")?;
        if lh * SCALE != h || lw * SCALE != w || s != self.config.bands {
            return Err(Error::dim("fusion inputs", pan, lr));
        }
        Ok((h, w))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, pan: Var, lr: Var) -> Result<ForwardTrace> {
        self.check_inputs(g.shape(pan), g.shape(lr))?;
        let ab = self.config.ablation;
        let m_up = g.resize_bicubic(lr, SCALE)?;
        let mut fa = self.stem_pan.forward(g, pan)?;
        let mut fb = self.stem_spec.forward(g, m_up)?;
        let mut fc: Option<Var> = None;
        let mut outs: Vec<StageOutputs> = Vec::with_capacity(STAGES);

        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                let (ra, rb, rc) = &self.resample[i - 1];
                fa = ra.forward(g, fa)?;
                fb = rb.forward(g, fb)?;
                if let (Some(r), Some(v)) = (rc, fc) {
                    fc = Some(r.forward(g, v)?);
                }
            }
            if let (true, Some(src)) = (ab.u_shape, SKIPS[i]) {
                let skip = outs[src];
                fa = g.add(fa, skip.spatial)?;
                fb = g.add(fb, skip.spectral)?;
                if let (Some(v), Some(sv)) = (fc, skip.combined) {
                    fc = Some(g.add(v, sv)?);
                }
            }
            if let Some(block) = &stage.spatial {
                fa = block.forward(g, fa)?;
            }
            if let Some(block) = &stage.spectral {
                fb = block.forward(g, fb)?;
            }
            let fused = stage.fusion.forward(g, fa, fb)?;
            fa = fused.out_a;
            if ab.combination_branch {
                fb = fused.out_b;
                fc = Some(match fc {
                    Some(prev) => g.add(fused.fused, prev)?,
                    None => fused.fused,
                });
            } else {
                fb = g.add(fused.out_b, fused.fused)?;
            }
            outs.push(StageOutputs { spatial: fa, spectral: fb, combined: fc });
        }

        let feature = fc.unwrap_or(fb);
        let head = self.head.forward(g, feature)?;
        let (gate, shaped) = match &self.mca {
            Some(mca) => {
                let gate = mca.gate(g, m_up)?;
                (Some(gate), g.scale_channels(head, gate)?)
            }
            None => (None, head),
        };
        let output = g.add(shaped, m_up)?;
        Ok(ForwardTrace { output, upsampled: m_up, head, gate, stages: outs })
    }

    /// Inference on plain tensors.
    pub fn fuse<T: Scalar>(&self, store: &ParamStore<T>, pan: &Tensor<T>, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(store);
        let p = g.input(pan.clone())?;
        let m = g.input(lr.clone())?;
        let trace = self.forward(&mut g, p, m)?;
        let out = g.value(trace.output).clone();
        out.ensure_finite("network output")?;
        Ok(out)
    }
}

/// Bicubic x4 of the low-resolution input; the baseline the network refines.
pub fn upsample_baseline<T: Scalar>(lr: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::<T>::detached();
    let v = g.input(lr.clone())?;
    let up = g.resize_bicubic(v, SCALE)?;
    Ok(g.value(up).clone())
}

/// Mean over the batch of the per-sample sum of absolute differences.
pub fn l1_loss<T: Scalar>(pred: &[Tensor<T>], target: &[Tensor<T>]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::dim("l1_loss batch", &[pred.len()], &[target.len()]));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        if p.shape() != t.shape() {
            return Err(Error::dim("l1_loss", p.shape(), t.shape()));
        }
        total += p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b).abs().to_f64_lossy()).sum::<f64>();
    }
    Ok(total / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(bands: usize) -> FusionNetConfig {
        FusionNetConfig::new(bands, 4, 2)
    }

    fn inputs(h: usize, s: usize) -> (Tensor<f64>, Tensor<f64>) {
        let pan = Tensor::from_vec(&[h, h, 1], (0..h * h).map(|i| ((i * 7) % 11) as f64 / 11.0).collect()).unwrap();
        let q = h / 4;
        let lr = Tensor::from_vec(&[q, q, s], (0..q * q * s).map(|i| ((i * 5) % 13) as f64 / 13.0).collect()).unwrap();
        (pan, lr)
    }

    #[test]
    fn stage_shapes_follow_plan() {
        let (net, store) = FusionNet::build::<f64>(tiny(3)).unwrap();
        let (pan, lr) = inputs(16, 3);
        let mut g = Graph::new(&store);
        let p = g.input(pan).unwrap();
        let m = g.input(lr).unwrap();
        let tr = net.forward(&mut g, p, m).unwrap();
        let expect = [[16, 16, 4], [8, 8, 8], [4, 4, 16], [8, 8, 8], [16, 16, 4]];
        for (o, e) in tr.stages.iter().zip(expect) {
            assert_eq!(g.shape(o.spatial), e);
            assert_eq!(g.shape(o.spectral), e);
            assert_eq!(g.shape(o.combined.unwrap()), e);
        }
        assert_eq!(g.shape(tr.output), [16, 16, 3]);
        assert!(g.value(tr.output).all_finite());
    }

    #[test]
    fn fresh_network_returns_upsampled_input() {
        let (net, store) = FusionNet::build::<f64>(tiny(3)).unwrap();
        let (pan, lr) = inputs(8, 3);
        let out = net.fuse(&store, &pan, &lr).unwrap();
        assert_eq!(out, upsample_baseline(&lr).unwrap());
    }

    #[test]
    fn indivisible_size_is_config_error() {
        let (net, _) = FusionNet::build::<f64>(tiny(2)).unwrap();
        assert!(matches!(net.check_inputs(&[10, 12, 1], &[2, 3, 2]), Err(Error::Config(_))));
        assert!(matches!(net.check_inputs(&[8, 8, 1], &[2, 2, 3]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let mut cfg = tiny(5);
        cfg.upsample = UpsampleKind::Bicubic;
        cfg.widths = WidthSchedule::Constant;
        cfg.ablation.mca = false;
        cfg.init_seed = 42;
        assert_eq!(FusionNetConfig::from_manifest(&cfg.to_manifest()).unwrap(), cfg);
    }

    #[test]
    fn ablations_build_and_run() {
        let variants = [
            Ablation { u_shape: false, ..Ablation::default() },
            Ablation { spatial_branch: false, ..Ablation::default() },
            Ablation { spectral_branch: false, ..Ablation::default() },
            Ablation { combination_branch: false, ..Ablation::default() },
            Ablation { mca: false, ..Ablation::default() },
        ];
        let (pan, lr) = inputs(8, 2);
        let full = FusionNet::build::<f64>(tiny(2)).unwrap().1.num_scalars();
        for ab in variants {
            let mut cfg = tiny(2);
            cfg.ablation = ab;
            let (net, store) = FusionNet::build::<f64>(cfg).unwrap();
            assert!(store.num_scalars() < full, "{ab:?}");
            let out = net.fuse(&store, &pan, &lr).unwrap();
            assert_eq!(out.shape(), [8, 8, 2]);
        }
    }

    #[test]
    fn l1_examples() {
        let a = Tensor::<f64>::zeros(&[2, 2, 1]).unwrap();
        let mut b = a.clone();
        assert_eq!(l1_loss(&[a.clone()], &[b.clone()]).unwrap(), 0.0);
        b.set(&[1, 0, 0], 0.5);
        assert_eq!(l1_loss(&[a], &[b]).unwrap(), 0.5);
    }
}
