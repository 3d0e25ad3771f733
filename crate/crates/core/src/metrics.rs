//! PSNR and SSIM.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03 and a
//! dynamic range of 1, evaluated over valid window positions only. Cubes are
//! scored band by band and averaged.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported for identical inputs, where the ratio is unbounded.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub psnr: f64,
    pub ssim: f64,
    pub band_psnr: Vec<f64>,
    pub band_ssim: Vec<f64>,
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// `10·log10(peak² / MSE)`; [`PSNR_CAP_DB`] when the inputs are identical.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::invalid("psnr of empty tensors"));
    }
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("psnr peak {peak} must be positive")));
    }
    Ok(psnr_from_mse(mse(a.data(), b.data()), peak))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable filtering.
fn blur_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|j| k[j] * img[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|j| k[j] * rows[(r + j) * ow + c]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mu_a = blur_valid(a, h, w, &k);
    let mu_b = blur_valid(b, h, w, &k);
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let e_aa = blur_valid(&sq(a, a), h, w, &k);
    let e_bb = blur_valid(&sq(b, b), h, w, &k);
    let e_ab = blur_valid(&sq(a, b), h, w, &k);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean SSIM of two H×W images.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("ssim", a.shape(), b.shape()));
    }
    let [h, w] = *a.shape() else {
        return Err(Error::invalid(format!(
            "ssim expects 2D images, got {:?}",
            a.shape()
        )));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let af: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let bf: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    Ok(ssim_plane(&af, &bf, h, w))
}

/// Per-band PSNR/SSIM of two H×W×Nλ cubes plus their band means.
pub fn quality(estimate: &Tensor<f32>, truth: &Tensor<f32>, peak: f64) -> Result<QualityReport> {
    if estimate.shape() != truth.shape() {
        return Err(Error::shape("quality", truth.shape(), estimate.shape()));
    }
    let [h, w, bands] = *truth.shape() else {
        return Err(Error::invalid(format!(
            "quality expects H×W×Nλ cubes, got {:?}",
            truth.shape()
        )));
    };
    let band = |t: &Tensor<f32>, n: usize| -> Vec<f32> {
        t.data().chunks_exact(bands).map(|px| px[n]).collect()
    };
    let mut band_psnr = Vec::with_capacity(bands);
    let mut band_ssim = Vec::with_capacity(bands);
    for n in 0..bands {
        let a = Tensor::new(vec![h, w], band(estimate, n))?;
        let b = Tensor::new(vec![h, w], band(truth, n))?;
        band_psnr.push(psnr(&a, &b, peak)?);
        band_ssim.push(ssim(&a, &b)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(QualityReport {
        psnr: mean(&band_psnr),
        ssim: mean(&band_ssim),
        band_psnr,
        band_ssim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Tensor<f32> {
        let mut v = Vec::new();
        for r in 0..h {
            for c in 0..w {
                v.push(f(r, c));
            }
        }
        Tensor::new(vec![h, w], v).unwrap()
    }

    #[test]
    fn psnr_analytic_values() {
        let a = t(4, 4, |r, c| (r * 4 + c) as f32 / 20.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 99.0);
        let zeros = t(4, 4, |_, _| 0.0);
        let tenth = t(4, 4, |_, _| 0.1);
        assert!((psnr(&zeros, &tenth, 1.0).unwrap() - 20.0).abs() < 1e-5);
        let half = t(4, 4, |_, _| 0.5);
        assert!((psnr(&zeros, &half, 1.0).unwrap() - 6.0206).abs() < 1e-4);
        assert!(psnr(&zeros, &t(2, 8, |_, _| 0.0), 1.0).is_err());
        assert!(psnr(&zeros, &half, 0.0).is_err());
    }

    #[test]
    fn ssim_identity_and_window_guard() {
        let a = t(16, 16, |r, c| ((r * 7 + c * 3) % 11) as f32 / 10.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let small = t(10, 16, |_, _| 0.0);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn quality_of_identical_cubes() {
        let cube = Tensor::new(
            vec![12, 12, 2],
            (0..288).map(|i| (i % 17) as f32 / 16.0).collect(),
        )
        .unwrap();
        let q = quality(&cube, &cube, 1.0).unwrap();
        assert_eq!(q.psnr, 99.0);
        assert!((q.ssim - 1.0).abs() < 1e-9);
        assert_eq!(q.band_psnr.len(), 2);
    }
}
