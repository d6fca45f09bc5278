//! Reduced-resolution quality indices for `[H, W, S]` images.
//!
//! In every function `pred` is the image under test and `reference` the
//! ground truth.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{hwc, Scalar, Tensor};

/// PSNR reported when the mean squared error is below `1e-12`.
pub const PSNR_CAP: f64 = 99.0;
pub const ERGAS_EPS: f64 = 1e-12;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    /// Degrees.
    pub sam: f64,
    pub ergas: f64,
    pub ssim: f64,
    /// Set when a reference band had mean below [`ERGAS_EPS`].
    pub ergas_guarded: bool,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "psnr={:.3} sam={:.3} ergas={:.3} ssim={:.3}", self.psnr, self.sam, self.ergas, self.ssim)
    }
}

impl MetricReport {
    /// Element-wise mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            psnr: sum(|r| r.psnr),
            sam: sum(|r| r.sam),
            ergas: sum(|r| r.ergas),
            ssim: sum(|r| r.ssim),
            ergas_guarded: reports.iter().any(|r| r.ergas_guarded),
        })
    }
}

fn check<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    if pred.shape() != reference.shape() {
        return Err(Error::dim(op, pred.shape(), reference.shape()));
    }
    hwc(pred.shape(), op)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < 1e-12 {
        PSNR_CAP
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn mse<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    if pred.shape() != reference.shape() {
        return Err(Error::dim("mse", pred.shape(), reference.shape()));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(sum / pred.numel() as f64)
}

pub fn psnr<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>, peak: f64) -> Result<f64> {
    check(pred, reference, "psnr")?;
    Ok(psnr_from_mse(mse(pred, reference)?, peak))
}

/// Mean spectral angle in degrees. Pixels where either spectrum has zero
/// norm are skipped.
pub fn sam<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    let (_, _, s) = check(pred, reference, "sam")?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for (pa, pb) in pred.data().chunks_exact(s).zip(reference.data().chunks_exact(s)) {
        let a: Vec<f64> = pa.iter().map(|v| v.to_f64_lossy()).collect();
        let b: Vec<f64> = pb.iter().map(|v| v.to_f64_lossy()).collect();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na * nb < 1e-12 {
            continue;
        }
        // 2 atan2(|u - v|, |u + v|) on unit vectors; well conditioned near 0 and 180.
        let (mut dm, mut dp) = (0.0, 0.0);
        for (x, y) in a.iter().zip(&b) {
            let (u, v) = (x / na, y / nb);
            dm += (u - v) * (u - v);
            dp += (u + v) * (u + v);
        }
        total += 2.0 * dm.sqrt().atan2(dp.sqrt());
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { (total / counted as f64).to_degrees() })
}

/// Returns the index and whether a near-zero reference band mean was guarded.
pub fn ergas<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>, ratio: f64) -> Result<(f64, bool)> {
    let (h, w, s) = check(pred, reference, "ergas")?;
    let n = (h * w) as f64;
    let mut acc = 0.0;
    let mut guarded = false;
    for band in 0..s {
        let (mut se, mut mean) = (0.0, 0.0);
        for (pa, pb) in pred.data().chunks_exact(s).zip(reference.data().chunks_exact(s)) {
            let (a, b) = (pa[band].to_f64_lossy(), pb[band].to_f64_lossy());
            se += (a - b) * (a - b);
            mean += b;
        }
        let mse = se / n;
        let mut mu = mean / n;
        if mu.abs() < ERGAS_EPS {
            guarded = true;
            mu = ERGAS_EPS;
        }
        acc += mse / (mu * mu);
    }
    Ok((100.0 / ratio * (acc / s as f64).sqrt(), guarded))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let kn = k.len();
    let (ho, wo) = (h - kn + 1, w - kn + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = (0..kn).map(|j| k[j] * x[y * w + xo + j]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = (0..kn).map(|j| k[j] * rows[(yo + j) * wo + xo]).sum();
        }
    }
    out
}

fn ssim_terms(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Mean SSIM over bands with an 11x11 Gaussian window (sigma 1.5), dynamic
/// range 1, valid region only. Images smaller than the window use global
/// per-band statistics.
pub fn ssim<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    let (h, w, s) = check(pred, reference, "ssim")?;
    let k = gaussian_window();
    let mut total = 0.0;
    for band in 0..s {
        let a: Vec<f64> = pred.data().iter().skip(band).step_by(s).map(|v| v.to_f64_lossy()).collect();
        let b: Vec<f64> = reference.data().iter().skip(band).step_by(s).map(|v| v.to_f64_lossy()).collect();
        if h < SSIM_WINDOW || w < SSIM_WINDOW {
            let n = (h * w) as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let second = |x: &[f64], y: &[f64], mx: f64, my: f64| {
                x.iter().zip(y).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n
            };
            total += ssim_terms(ma, mb, second(&a, &a, ma, ma), second(&b, &b, mb, mb), second(&a, &b, ma, mb));
            continue;
        }
        let sq = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
        let mu_a = filter_valid(&a, h, w, &k);
        let mu_b = filter_valid(&b, h, w, &k);
        let e_aa = filter_valid(&sq(&a, &a), h, w, &k);
        let e_bb = filter_valid(&sq(&b, &b), h, w, &k);
        let e_ab = filter_valid(&sq(&a, &b), h, w, &k);
        let n = mu_a.len();
        let mut band_sum = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            band_sum += ssim_terms(ma, mb, e_aa[i] - ma * ma, e_bb[i] - mb * mb, e_ab[i] - ma * mb);
        }
        total += band_sum / n as f64;
    }
    Ok(total / s as f64)
}

/// All four indices with ERGAS at the given resolution ratio.
pub fn evaluate<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>, ratio: f64) -> Result<MetricReport> {
    let (ergas, ergas_guarded) = ergas(pred, reference, ratio)?;
    Ok(MetricReport {
        psnr: psnr(pred, reference, 1.0)?,
        sam: sam(pred, reference)?,
        ergas,
        ssim: ssim(pred, reference)?,
        ergas_guarded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, s: usize) -> Tensor<f64> {
        Tensor::from_vec(&[h, w, s], (0..h * w * s).map(|i| 0.1 + ((i * 37) % 101) as f64 / 150.0).collect()).unwrap()
    }

    #[test]
    fn identity_inputs() {
        for (h, w) in [(16, 16), (4, 6)] {
            let a = ramp(h, w, 3);
            let r = evaluate(&a, &a, 4.0).unwrap();
            assert_eq!(r.sam, 0.0);
            assert_eq!(r.ergas, 0.0);
            assert_eq!(r.ssim, 1.0);
            assert_eq!(r.psnr, PSNR_CAP);
            assert_eq!(r.to_string(), "psnr=99.000 sam=0.000 ergas=0.000 ssim=1.000");
        }
    }

    #[test]
    fn psnr_closed_form() {
        assert_eq!(psnr_from_mse(0.01, 1.0), 20.0);
    }

    #[test]
    fn orthogonal_spectra_give_right_angle() {
        let a = Tensor::<f64>::from_f64(&[1, 2, 2], &[1., 0., 0., 2.]).unwrap();
        let b = Tensor::from_f64(&[1, 2, 2], &[0., 3., 5., 0.]).unwrap();
        assert!((sam(&a, &b).unwrap() - 90.0).abs() < 1e-12);
    }

    #[test]
    fn zero_pixels_skipped() {
        let a = Tensor::<f64>::from_f64(&[1, 2, 2], &[0., 0., 1., 1.]).unwrap();
        let b = Tensor::from_f64(&[1, 2, 2], &[1., 0., 1., 1.]).unwrap();
        assert_eq!(sam(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn ergas_relative_scaling_on_constant_bands() {
        let b = Tensor::from_f64(&[4, 4, 2], &[[0.3, 0.6]; 16].concat()).unwrap();
        let eps = 0.05;
        let a = b.scale(1.0 + eps);
        let (e, guarded) = ergas(&a, &b, 4.0).unwrap();
        assert!((e - 100.0 / 4.0 * eps).abs() < 1e-12);
        assert!(!guarded);
    }

    #[test]
    fn ergas_flags_zero_band() {
        let b = Tensor::<f64>::zeros(&[2, 2, 1]).unwrap();
        let a = Tensor::full(&[2, 2, 1], 0.1).unwrap();
        let (e, guarded) = ergas(&a, &b, 4.0).unwrap();
        assert!(guarded && e.is_finite());
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = ramp(4, 4, 2);
        let b = ramp(4, 4, 3);
        assert!(evaluate(&a, &b, 4.0).is_err());
    }
}
