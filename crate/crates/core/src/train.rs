//! Adam, the step learning-rate schedule, and a deterministic training loop
//! with resumable checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::data::{parse_key_values, SamplePair};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::network::{FusionNet, FusionNetConfig, SCALE};
use crate::params::ParamStore;
use crate::tensor::{write_fmt, Scalar, Tensor};

pub const MODEL_MANIFEST: &str = "model.manifest";
pub const TRAIN_MANIFEST: &str = "train.manifest";
pub const DUMP_DIR: &str = "nonfinite_batch";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Epochs between learning-rate halvings.
    pub halve_every: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; `0` only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr0: 5e-4,
            halve_every: 200,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.halve_every == 0 {
            return Err(Error::Config("halve_every must be at least 1".into()));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }

    fn to_manifest(&self, m: &mut BTreeMap<String, String>) {
        m.insert("epochs".into(), self.epochs.to_string());
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("lr0".into(), format!("{:e}", self.lr0));
        m.insert("halve_every".into(), self.halve_every.to_string());
        m.insert("adam_beta1".into(), format!("{:e}", self.adam.beta1));
        m.insert("adam_beta2".into(), format!("{:e}", self.adam.beta2));
        m.insert("adam_eps".into(), format!("{:e}", self.adam.eps));
        m.insert("seed".into(), self.seed.to_string());
        m.insert("checkpoint_every".into(), self.checkpoint_every.to_string());
    }

    fn from_manifest(m: &BTreeMap<String, String>) -> Result<Self> {
        let cfg = Self {
            epochs: manifest_value(m, "epochs")?,
            batch_size: manifest_value(m, "batch_size")?,
            lr0: manifest_value(m, "lr0")?,
            halve_every: manifest_value(m, "halve_every")?,
            adam: AdamConfig {
                beta1: manifest_value(m, "adam_beta1")?,
                beta2: manifest_value(m, "adam_beta2")?,
                eps: manifest_value(m, "adam_eps")?,
            },
            seed: manifest_value(m, "seed")?,
            checkpoint_every: manifest_value(m, "checkpoint_every")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn manifest_value<V: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<V> {
    m.get(key)
        .ok_or_else(|| Error::Config(format!("manifest missing key {key}")))?
        .parse()
        .map_err(|_| Error::Config(format!("manifest key {key} has invalid value")))
}

fn write_manifest(path: &Path, m: &BTreeMap<String, String>) -> Result<()> {
    let text: String = m.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    fs::write(path, text)?;
    Ok(())
}

/// Learning rate for the zero-based epoch `epoch`: `lr0 * 2^-floor(epoch / halve_every)`.
pub fn lr_at(lr0: f64, halve_every: usize, epoch: usize) -> f64 {
    let halvings = (epoch / halve_every.max(1)).min(i32::MAX as usize) as i32;
    lr0 * 2f64.powi(-halvings)
}

/// Adam with bias correction. Moments are kept per parameter in store order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store.ids().map(|id| store.value(id).zeros_like()).collect();
        Self { config, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !store.grads_ready() {
            return Err(Error::Usage("adam step without a populated gradient".into()));
        }
        if store.len() != self.m.len() {
            return Err(Error::Usage("optimizer state does not match the parameter store".into()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step.min(i32::MAX as u64) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (values, grads) = store.values_and_grads_mut();
        for (((p, g), m), v) in values.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let rows = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((pv, &gv), mv), vv) in rows {
                let gf = gv.to_f64_lossy();
                let mf = beta1 * mv.to_f64_lossy() + (1.0 - beta1) * gf;
                let vf = beta2 * vv.to_f64_lossy() + (1.0 - beta2) * gf * gf;
                *mv = T::from_f64_lossy(mf);
                *vv = T::from_f64_lossy(vf);
                let update = lr * (mf / c1) / ((vf / c2).sqrt() + eps);
                *pv = T::from_f64_lossy(pv.to_f64_lossy() - update);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    /// Mean per-sample l1 loss over the epoch, measured before each update.
    pub loss: f64,
    pub lr: f64,
    /// Mean indices on the held-out split, if one was given.
    pub held_out: Option<MetricReport>,
}

impl std::fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let m = self.held_out.unwrap_or(MetricReport {
            psnr: f64::NAN,
            sam: f64::NAN,
            ergas: f64::NAN,
            ssim: f64::NAN,
            ergas_guarded: false,
        });
        write!(
            f,
            "epoch={} loss={:.6} lr={:e} psnr={:.4} sam={:.4} ergas={:.4}",
            self.epoch, self.loss, self.lr, m.psnr, m.sam, m.ergas
        )
    }
}

/// Network, parameters and optimizer state between epochs.
pub struct Trainer<T: Scalar> {
    pub net: FusionNet,
    pub store: ParamStore<T>,
    pub adam: Adam<T>,
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: FusionNet, store: ParamStore<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&store, config.adam);
        Ok(Self { net, store, adam, config, epoch: 0, history: Vec::new() })
    }

    /// Sample order for zero-based epoch `epoch`; depends only on the seed and epoch.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mix = (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(self.config.seed ^ mix);
        order.shuffle(&mut rng);
        order
    }

    /// Runs one epoch over `train`, then scores `held_out`.
    pub fn run_epoch(&mut self, train: &[SamplePair<T>], held_out: &[SamplePair<T>], dump: Option<&Path>) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        let e = self.epoch;
        let lr = lr_at(self.config.lr0, self.config.halve_every, e);
        let order = self.epoch_order(e, train.len());
        let mut total = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let inv = 1.0 / batch.len() as f64;
            let (net, store) = (&self.net, &self.store);
            let results: Vec<Result<(f64, crate::autodiff::Gradients<T>)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train[i];
                    let mut g = Graph::new(store);
                    let p = g.input(s.pan.clone())?;
                    let m = g.input(s.lr.clone())?;
                    let trace = net.forward(&mut g, p, m)?;
                    let l = g.abs_diff_sum(trace.output, &s.gt)?;
                    let value = g.value(l).data()[0].to_f64_lossy();
                    let scaled = g.scale(l, inv)?;
                    Ok((value, g.backward(scaled)?))
                })
                .collect();
            let mut losses = Vec::with_capacity(batch.len());
            let mut grads = Vec::with_capacity(batch.len());
            let mut bad: Option<String> = None;
            for r in results {
                match r {
                    Ok((l, g)) => {
                        if !l.is_finite() && bad.is_none() {
                            bad = Some(format!("loss {l}"));
                        }
                        losses.push(l);
                        grads.push(g);
                    }
                    Err(Error::NonFinite(m)) => {
                        bad.get_or_insert(m);
                    }
                    Err(err) => return Err(err),
                }
            }
            if let Some(what) = bad {
                let msg = format!("{what} at epoch {} on samples {batch:?}", e + 1);
                if let Some(dir) = dump {
                    dump_batch(&dir.join(DUMP_DIR), train, batch)?;
                    return Err(Error::NonFinite(format!("{msg}; batch written to {}", dir.join(DUMP_DIR).display())));
                }
                return Err(Error::NonFinite(msg));
            }
            // fixed order regardless of how the batch was scheduled
            for g in &grads {
                self.store.accumulate(g)?;
            }
            self.adam.step(&mut self.store, lr)?;
            total += losses.iter().sum::<f64>();
        }
        let held = if held_out.is_empty() { None } else { Some(self.evaluate(held_out)?) };
        self.epoch += 1;
        let rec = EpochRecord { epoch: self.epoch, loss: total / train.len() as f64, lr, held_out: held };
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Mean metric report of the network on `samples`.
    pub fn evaluate(&self, samples: &[SamplePair<T>]) -> Result<MetricReport> {
        let reports = samples
            .par_iter()
            .map(|s| {
                let out = self.net.fuse(&self.store, &s.pan, &s.lr)?;
                evaluate(&out, &s.gt, SCALE as f64)
            })
            .collect::<Result<Vec<_>>>()?;
        MetricReport::mean(&reports).ok_or_else(|| Error::Usage("no samples to evaluate".into()))
    }

    /// Trains until `config.epochs` epochs are complete, checkpointing into
    /// `out` per the schedule and calling `on_epoch` after each epoch.
    pub fn run(
        &mut self,
        train: &[SamplePair<T>],
        held_out: &[SamplePair<T>],
        out: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        while self.epoch < self.config.epochs {
            let rec = self.run_epoch(train, held_out, out)?;
            on_epoch(&rec);
            let every = self.config.checkpoint_every;
            let last = self.epoch == self.config.epochs;
            if let Some(dir) = out {
                if last || (every > 0 && self.epoch % every == 0) {
                    self.save(dir)?;
                }
            }
        }
        Ok(())
    }

    /// Writes parameters, optimizer moments and both manifests into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.store.save_dir(dir.join("params"))?;
        moments_store(&self.store, &self.adam.m).save_dir(dir.join("adam_m"))?;
        moments_store(&self.store, &self.adam.v).save_dir(dir.join("adam_v"))?;
        write_manifest(&dir.join(MODEL_MANIFEST), &self.net.config.to_manifest())?;
        let mut m = BTreeMap::new();
        self.config.to_manifest(&mut m);
        m.insert("epoch".into(), self.epoch.to_string());
        m.insert("step".into(), self.adam.step.to_string());
        if let Some(last) = self.history.last() {
            m.insert("loss".into(), format!("{:e}", last.loss));
        }
        write_manifest(&dir.join(TRAIN_MANIFEST), &m)
    }

    /// Restores a trainer written by [`Trainer::save`].
    pub fn resume(dir: &Path) -> Result<Self> {
        let (net, store) = load_model::<T>(dir)?;
        let tm = parse_key_values(&fs::read_to_string(dir.join(TRAIN_MANIFEST))?)?;
        let config = TrainConfig::from_manifest(&tm)?;
        let m = ParamStore::<T>::load_dir(dir.join("adam_m"))?;
        let v = ParamStore::<T>::load_dir(dir.join("adam_v"))?;
        if m.names() != store.names() || v.names() != store.names() {
            return Err(Error::Format("optimizer state does not match the parameters".into()));
        }
        let adam = Adam {
            config: config.adam,
            m: m.ids().map(|id| m.value(id).clone()).collect(),
            v: v.ids().map(|id| v.value(id).clone()).collect(),
            step: manifest_value(&tm, "step")?,
        };
        let epoch = manifest_value(&tm, "epoch")?;
        Ok(Self { net, store, adam, config, epoch, history: Vec::new() })
    }
}

fn moments_store<T: Scalar>(like: &ParamStore<T>, moments: &[Tensor<T>]) -> ParamStore<T> {
    let mut s = ParamStore::new();
    for (name, t) in like.names().iter().zip(moments) {
        s.add(name.clone(), t.clone()).expect("names already unique");
    }
    s
}

/// Loads the network description and parameters from a checkpoint directory.
pub fn load_model<T: Scalar>(dir: &Path) -> Result<(FusionNet, ParamStore<T>)> {
    let mm = parse_key_values(&fs::read_to_string(dir.join(MODEL_MANIFEST))?)?;
    let cfg = FusionNetConfig::from_manifest(&mm)?;
    let (net, mut store) = FusionNet::build::<T>(cfg)?;
    let saved = ParamStore::<T>::load_dir(dir.join("params"))?;
    store.copy_values_from(&saved)?;
    Ok((net, store))
}

fn dump_batch<T: Scalar>(dir: &PathBuf, train: &[SamplePair<T>], batch: &[usize]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for &i in batch {
        let s = &train[i];
        write_fmt(dir.join(format!("pan_{i:05}.fmt")), &s.pan)?;
        write_fmt(dir.join(format!("lr_{i:05}.fmt")), &s.lr)?;
        write_fmt(dir.join(format!("gt_{i:05}.fmt")), &s.gt)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    #[test]
    fn schedule_halves_on_boundaries() {
        assert_eq!(lr_at(1e-3, 200, 0), 1e-3);
        assert_eq!(lr_at(1e-3, 200, 199), 1e-3);
        assert_eq!(lr_at(1e-3, 200, 200), 5e-4);
        // epoch 401 in one-based counting
        assert_eq!(lr_at(1e-3, 200, 400), 2.5e-4);
    }

    fn scalar_store(v: f64) -> (ParamStore<f64>, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::from_vec(&[1], vec![v]).unwrap()).unwrap();
        (s, id)
    }

    fn step_with(s: &mut ParamStore<f64>, adam: &mut Adam<f64>, id: crate::params::ParamId, g: f64, lr: f64) {
        s.accumulate_grad(id, &Tensor::from_vec(&[1], vec![g]).unwrap()).unwrap();
        s.mark_grads_ready();
        adam.step(s, lr).unwrap();
    }

    #[test]
    fn first_step_is_lr_regardless_of_scale() {
        for g in [1e-6, 1.0, 1e4] {
            let (mut s, id) = scalar_store(0.0);
            let mut adam = Adam::new(&s, AdamConfig::default());
            step_with(&mut s, &mut adam, id, g, 0.01);
            let moved = -s.value(id).data()[0];
            assert!((moved - 0.01).abs() < 1e-4, "g={g} moved {moved}");
        }
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = Adam::new(&s, AdamConfig::default());
        let mut prev = 1.0;
        for _ in 0..50 {
            step_with(&mut s, &mut adam, id, 1.0, 1e-2);
            let now = s.value(id).data()[0];
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut s, id) = scalar_store(0.25);
        let mut adam = Adam::new(&s, AdamConfig::default());
        step_with(&mut s, &mut adam, id, 0.0, 1e-2);
        assert_eq!(s.value(id).data()[0], 0.25);
    }

    #[test]
    fn step_without_gradient_is_usage_error() {
        let (mut s, _) = scalar_store(0.25);
        let mut adam = Adam::new(&s, AdamConfig::default());
        assert!(matches!(adam.step(&mut s, 1e-2), Err(Error::Usage(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = [
            TrainConfig { lr0: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { halve_every: 0, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let (net, store) = FusionNet::build::<f64>(FusionNetConfig::new(2, 4, 2)).unwrap();
        let t = Trainer::new(net, store, TrainConfig { seed: 9, ..TrainConfig::default() }).unwrap();
        let a = t.epoch_order(3, 10);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a, t.epoch_order(3, 10));
        assert_ne!(a, t.epoch_order(4, 10));
    }

    #[test]
    fn tiny_run_reduces_loss() {
        let ds = generate_synthetic(3, 2, 16, 16, 2).unwrap().cast::<f64>();
        let (net, store) = FusionNet::build::<f64>(FusionNetConfig::new(2, 4, 2)).unwrap();
        let cfg = TrainConfig { epochs: 12, batch_size: 2, lr0: 2e-3, ..TrainConfig::default() };
        let mut t = Trainer::new(net, store, cfg).unwrap();
        t.run(&ds.samples, &[], None, |_| {}).unwrap();
        let first = t.history[0].loss;
        let last = t.history.last().unwrap().loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn log_line_format() {
        let rec = EpochRecord {
            epoch: 3,
            loss: 0.5,
            lr: 5e-4,
            held_out: Some(MetricReport { psnr: 30.0, sam: 2.0, ergas: 1.5, ssim: 0.9, ergas_guarded: false }),
        };
        assert_eq!(rec.to_string(), "epoch=3 loss=0.500000 lr=5e-4 psnr=30.0000 sam=2.0000 ergas=1.5000");
    }
}
