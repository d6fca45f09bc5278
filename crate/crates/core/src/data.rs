//! Synthetic PAN / low-resolution / ground-truth triplets built by degrading
//! a known high-resolution image, and their on-disk layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::SCALE;
use crate::tensor::{read_fmt, write_fmt};
use crate::tensor::{hwc, Scalar, Tensor};

pub const BLUR_SIGMA: f64 = 1.0;
pub const BLUR_TAPS: usize = 5;
pub const PAN_JITTER: f64 = 0.1;
pub const MANIFEST: &str = "dataset.manifest";

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair<T> {
    /// `[H, W, 1]`
    pub pan: Tensor<T>,
    /// `[H/4, W/4, S]`
    pub lr: Tensor<T>,
    /// `[H, W, S]`
    pub gt: Tensor<T>,
}

impl<T: Scalar> SamplePair<T> {
    pub fn cast<U: Scalar>(&self) -> SamplePair<U> {
        SamplePair { pan: self.pan.cast(), lr: self.lr.cast(), gt: self.gt.cast() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub pan_weights: Vec<f64>,
    pub samples: Vec<SamplePair<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            seed: self.seed,
            height: self.height,
            width: self.width,
            bands: self.bands,
            pan_weights: self.pan_weights.clone(),
            samples: self.samples.iter().map(SamplePair::cast).collect(),
        }
    }

    /// Splits off the last `n` samples.
    pub fn split_tail(mut self, n: usize) -> Result<(Self, Self)> {
        if n >= self.samples.len() {
            return Err(Error::Usage(format!("cannot hold out {n} of {} samples", self.samples.len())));
        }
        let tail = self.samples.split_off(self.samples.len() - n);
        let held = Dataset { samples: tail, ..self.clone_header() };
        Ok((self, held))
    }

    fn clone_header(&self) -> Self {
        Dataset {
            seed: self.seed,
            height: self.height,
            width: self.width,
            bands: self.bands,
            pan_weights: self.pan_weights.clone(),
            samples: Vec::new(),
        }
    }
}

/// PAN spectral weights: `1/S` each with a uniform `+-10%` jitter, renormalized.
pub fn pan_weights(seed: u64, bands: usize) -> Vec<f64> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let raw: Vec<f64> = (0..bands)
        .map(|_| (1.0 + rng.random_range(-PAN_JITTER..=PAN_JITTER)) / bands as f64)
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

fn check_geometry(h: usize, w: usize, s: usize) -> Result<()> {
    if h == 0 || w == 0 || s == 0 {
        return Err(Error::Config("height, width and bands must be positive".into()));
    }
    if h % SCALE != 0 || w % SCALE != 0 {
        return Err(Error::Config(format!("height and width must be divisible by {SCALE}, got {h}x{w}")));
    }
    Ok(())
}

/// Deterministic dataset of `count` triplets. Sample `i` uses seed `seed ^ (i + 1)`.
pub fn generate_synthetic(seed: u64, count: usize, h: usize, w: usize, s: usize) -> Result<Dataset<f64>> {
    check_geometry(h, w, s)?;
    let weights = pan_weights(seed, s);
    let samples = (0..count)
        .into_par_iter()
        .map(|i| {
            let gt = ground_truth(seed ^ (i as u64 + 1), h, w, s);
            let (pan, lr) = degrade(&gt, &weights)?;
            Ok(SamplePair { pan, lr, gt })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { seed, height: h, width: w, bands: s, pan_weights: weights, samples })
}

/// PAN by weighted band sum and the low-resolution image by blur then 4x decimation.
pub fn degrade(gt: &Tensor<f64>, weights: &[f64]) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let (h, w, s) = hwc(gt.shape(), "degrade")?;
    check_geometry(h, w, s)?;
    if weights.len() != s {
        return Err(Error::dim("degrade weights", gt.shape(), &[weights.len()]));
    }
    let pan: Vec<f64> = gt
        .data()
        .chunks_exact(s)
        .map(|px| px.iter().zip(weights).map(|(v, k)| v * k).sum::<f64>().clamp(0.0, 1.0))
        .collect();
    let blurred = gaussian_blur(gt.data(), h, w, s);
    Ok((Tensor::from_vec(&[h, w, 1], pan)?, Tensor::from_vec(&[h / SCALE, w / SCALE, s], decimate(&blurred, h, w, s))?))
}

fn blur_kernel() -> [f64; BLUR_TAPS] {
    let r = (BLUR_TAPS / 2) as f64;
    let mut k = [0.0; BLUR_TAPS];
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - r).powi(2)) / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

/// Separable 5x5 Gaussian with replicated edges, so constants are preserved.
fn gaussian_blur(x: &[f64], h: usize, w: usize, s: usize) -> Vec<f64> {
    let k = blur_kernel();
    let r = BLUR_TAPS as isize / 2;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; x.len()];
    for y in 0..h {
        for xx in 0..w {
            for c in 0..s {
                rows[(y * w + xx) * s + c] = (0..BLUR_TAPS)
                    .map(|j| k[j] * x[(y * w + clampi(xx as isize + j as isize - r, w)) * s + c])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; x.len()];
    for y in 0..h {
        for xx in 0..w {
            for c in 0..s {
                out[(y * w + xx) * s + c] = (0..BLUR_TAPS)
                    .map(|j| k[j] * rows[(clampi(y as isize + j as isize - r, h) * w + xx) * s + c])
                    .sum();
            }
        }
    }
    out
}

/// Average of the two central samples of each 4-pixel block along both axes,
/// which keeps the low-resolution grid centered on the high-resolution one.
fn decimate(x: &[f64], h: usize, w: usize, s: usize) -> Vec<f64> {
    let (lh, lw) = (h / SCALE, w / SCALE);
    let mut out = vec![0.0; lh * lw * s];
    for i in 0..lh {
        for j in 0..lw {
            for c in 0..s {
                let mut acc = 0.0;
                for dy in 1..=2 {
                    for dx in 1..=2 {
                        acc += x[((SCALE * i + dy) * w + SCALE * j + dx) * s + c];
                    }
                }
                out[(i * lw + j) * s + c] = acc / 4.0;
            }
        }
    }
    out
}

/// Smooth random spectrum in `[0.05, 0.95]`.
fn spectrum(rng: &mut Xoshiro256PlusPlus, s: usize) -> Vec<f64> {
    let base: f64 = rng.random_range(0.2..0.8);
    let slope: f64 = rng.random_range(-0.3..0.3);
    let amp: f64 = rng.random_range(0.0..0.2);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    (0..s)
        .map(|b| {
            let t = if s > 1 { b as f64 / (s - 1) as f64 } else { 0.5 };
            (base + slope * (t - 0.5) + amp * (phase + 3.0 * t).sin()).clamp(0.05, 0.95)
        })
        .collect()
}

/// White noise low-passed with a wide Gaussian, rescaled to `[0, 1]`.
fn smooth_field(rng: &mut Xoshiro256PlusPlus, h: usize, w: usize) -> Vec<f64> {
    let noise: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
    let sigma = (h.min(w) as f64 / 12.0).max(1.0);
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let refl = |v: isize, n: usize| -> usize {
        let n = n as isize;
        let mut v = v;
        while v < 0 || v >= n {
            v = if v < 0 { -v - 1 } else { 2 * n - v - 1 };
        }
        v as usize
    };
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = k.iter().enumerate().map(|(j, kv)| kv * noise[y * w + refl(x as isize + j as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k.iter().enumerate().map(|(j, kv)| kv * rows[refl(y as isize + j as isize - r, h) * w + x]).sum();
        }
    }
    let (lo, hi) = out.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    out.into_iter().map(|v| (v - lo) / span).collect()
}

/// Band-correlated texture: a smooth mixture of three materials, a linear
/// ramp in a fourth, and sharp rectangles of further materials.
fn ground_truth(seed: u64, h: usize, w: usize, s: usize) -> Tensor<f64> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    const MATERIALS: usize = 3;
    let spectra: Vec<Vec<f64>> = (0..MATERIALS).map(|_| spectrum(&mut rng, s)).collect();
    let fields: Vec<Vec<f64>> = (0..MATERIALS).map(|_| smooth_field(&mut rng, h, w)).collect();
    let ramp_spec = spectrum(&mut rng, s);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let proj = |y: usize, x: usize| (y as f64 / h as f64 - 0.5) * dy + (x as f64 / w as f64 - 0.5) * dx;
    let mut out = vec![0.0; h * w * s];
    for y in 0..h {
        for x in 0..w {
            let weights: Vec<f64> = fields.iter().map(|f| (f[y * w + x] + 0.05).powi(3)).collect();
            let total: f64 = weights.iter().sum();
            let ramp = (proj(y, x) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            for b in 0..s {
                let mix: f64 = weights.iter().zip(&spectra).map(|(a, sp)| a * sp[b]).sum::<f64>() / total;
                out[(y * w + x) * s + b] = 0.7 * mix + 0.3 * ramp * ramp_spec[b];
            }
        }
    }
    let rects = rng.random_range(2..=5);
    for _ in 0..rects {
        let sp = spectrum(&mut rng, s);
        let rh = rng.random_range(h / 8..=h / 3).max(1);
        let rw = rng.random_range(w / 8..=w / 3).max(1);
        let y0 = rng.random_range(0..=h - rh);
        let x0 = rng.random_range(0..=w - rw);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                for b in 0..s {
                    let v = &mut out[(y * w + x) * s + b];
                    *v = 0.4 * *v + 0.6 * sp[b];
                }
            }
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::from_parts(vec![h, w, s], out)
}

fn sample_path(dir: &Path, kind: &str, i: usize) -> std::path::PathBuf {
    dir.join(format!("{kind}_{i:05}.fmt"))
}

/// Writes the triplets as single-precision tensors plus `dataset.manifest`.
pub fn write_dataset<T: Scalar>(dir: impl AsRef<Path>, ds: &Dataset<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, s) in ds.samples.iter().enumerate() {
        write_fmt(sample_path(dir, "pan", i), &s.pan.cast::<f32>())?;
        write_fmt(sample_path(dir, "lr", i), &s.lr.cast::<f32>())?;
        write_fmt(sample_path(dir, "gt", i), &s.gt.cast::<f32>())?;
    }
    let weights: Vec<String> = ds.pan_weights.iter().map(|v| v.to_string()).collect();
    let manifest = format!(
        "seed={}\ncount={}\nH={}\nW={}\nS={}\npan_weights={}\n",
        ds.seed,
        ds.samples.len(),
        ds.height,
        ds.width,
        ds.bands,
        weights.join(",")
    );
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Parses `key=value` lines; blank lines and `#` comments are ignored.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        if out.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {}", n + 1, k.trim())));
        }
    }
    Ok(out)
}

pub fn read_dataset<T: Scalar>(dir: impl AsRef<Path>) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let m = parse_key_values(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let num = |k: &str| -> Result<usize> {
        m.get(k)
            .ok_or_else(|| Error::Format(format!("dataset manifest missing {k}")))?
            .parse()
            .map_err(|_| Error::Format(format!("dataset manifest key {k} is not an integer")))
    };
    let (count, h, w, s) = (num("count")?, num("H")?, num("W")?, num("S")?);
    let seed = m
        .get("seed")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("dataset manifest seed missing or invalid".into()))?;
    let pan_weights = m
        .get("pan_weights")
        .ok_or_else(|| Error::Format("dataset manifest missing pan_weights".into()))?
        .split(',')
        .map(|v| v.parse::<f64>().map_err(|_| Error::Format("invalid pan weight".into())))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let pair = SamplePair {
            pan: read_fmt::<T>(sample_path(dir, "pan", i))?,
            lr: read_fmt::<T>(sample_path(dir, "lr", i))?,
            gt: read_fmt::<T>(sample_path(dir, "gt", i))?,
        };
        if pair.pan.shape() != [h, w, 1] || pair.gt.shape() != [h, w, s] || pair.lr.shape() != [h / SCALE, w / SCALE, s] {
            return Err(Error::Shape { shape: pair.gt.shape().to_vec(), reason: format!("sample {i} disagrees with manifest") });
        }
        samples.push(pair);
    }
    Ok(Dataset { seed, height: h, width: w, bands: s, pan_weights, samples })
}
