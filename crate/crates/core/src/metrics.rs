//! PSNR and SSIM on unit-range images.
//!
//! SSIM uses the usual constants: an 11×11 Gaussian window with σ = 1.5,
//! `K1 = 0.01`, `K2 = 0.03`, dynamic range 1. Only windows fully inside the
//! image contribute, and multi-channel images average the per-channel means.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::noise::{NoiseKind, NoiseParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// One evaluation cell: model conditioned at `sigma_tr`, images corrupted at
/// level `sigma_val` of `noise_kind`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub sigma_tr: NoiseParams,
    pub sigma_val: f64,
    pub noise_kind: NoiseKind,
    pub psnr_db: f64,
    pub ssim: f64,
    pub residual_std: f64,
    pub n_images: usize,
}

fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return shape_err("psnr", a.shape(), b.shape());
    }
    if a.numel() == 0 {
        return Err(Error::Empty("psnr"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.numel() as f64)
}

/// `10·log10(peak² / mse)` in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two `[C, H, W]` images.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return shape_err("ssim", a.shape(), b.shape());
    }
    let [c, h, w] = [a.shape()[0], a.shape()[1], a.shape()[2]];
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let pb: Vec<f64> = b.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let e_aa = filter_valid(&aa, h, w, &taps);
        let e_bb = filter_valid(&bb, h, w, &taps);
        let e_ab = filter_valid(&ab, h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// Direct evaluation of the SSIM formula: for every window position the 2-D
/// Gaussian weights, weighted means and central moments are computed from
/// scratch. Much slower than [`ssim`]; kept as an independent test oracle.
pub fn ssim_reference<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return shape_err("ssim_reference", a.shape(), b.shape());
    }
    let [c, h, w] = [a.shape()[0], a.shape()[1], a.shape()[2]];
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::InvalidArgument(format!("ssim needs at least {k}x{k}, got {h}x{w}")));
    }
    let half = (k / 2) as f64;
    let mut window = vec![vec![0.0; k]; k];
    let mut norm = 0.0;
    for (i, row) in window.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - half, j as f64 - half);
            *v = (-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            norm += *v;
        }
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let px = |t: &Tensor<T>, ch: usize, y: usize, x: usize| t.data()[(ch * h + y) * w + x].as_f64();
    let mut total = 0.0;
    for ch in 0..c {
        let mut sum = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = window[i][j] / norm;
                        ma += wt * px(a, ch, y0 + i, x0 + j);
                        mb += wt * px(b, ch, y0 + i, x0 + j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = window[i][j] / norm;
                        let da = px(a, ch, y0 + i, x0 + j) - ma;
                        let db = px(b, ch, y0 + i, x0 + j) - mb;
                        va += wt * da * da;
                        vb += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / c as f64)
}

/// Arithmetic mean of per-image records (PSNR averaged in dB). The result
/// does not depend on input order.
pub fn mean_metrics(records: &[MetricRecord]) -> Result<MetricRecord> {
    let first = records.first().ok_or(Error::Empty("mean_metrics"))?;
    let mean = |f: fn(&MetricRecord) -> f64| {
        let mut v: Vec<f64> = records.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / v.len() as f64
    };
    Ok(MetricRecord {
        psnr_db: mean(|r| r.psnr_db),
        ssim: mean(|r| r.ssim),
        residual_std: mean(|r| r.residual_std),
        n_images: records.iter().map(|r| r.n_images).sum(),
        ..*first
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(psnr: f64) -> MetricRecord {
        MetricRecord {
            sigma_tr: NoiseParams::gaussian(0.1),
            sigma_val: 0.1,
            noise_kind: NoiseKind::Gaussian,
            psnr_db: psnr,
            ssim: 0.5,
            residual_std: 0.01,
            n_images: 1,
        }
    }

    #[test]
    fn psnr_constant_offsets() {
        let a = Tensor::<f64>::from_fn(&[3, 16, 16], |i| (i % 50) as f64 / 100.0);
        assert!((psnr(&a, &a.map(|v| v + 0.1), 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr(&a, &a.map(|v| v + 0.05), 1.0).unwrap() - 26.020599913279625).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        assert!(psnr(&a, &Tensor::zeros(&[3, 16, 15]), 1.0).is_err());
    }

    #[test]
    fn ssim_identical_and_black_white() {
        let a = Tensor::<f64>::from_fn(&[3, 16, 16], |i| ((i * 7919) % 101) as f64 / 100.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let black = Tensor::<f64>::zeros(&[1, 12, 12]);
        let white = Tensor::<f64>::ones(&[1, 12, 12]);
        let expected = 1e-4 / (1.0 + 1e-4);
        assert!((ssim(&black, &white).unwrap() - expected).abs() < 1e-15);
        assert!(ssim(&Tensor::<f64>::zeros(&[1, 10, 12]), &Tensor::zeros(&[1, 10, 12])).is_err());
    }

    #[test]
    fn mean_metrics_cases() {
        let one = mean_metrics(&[rec(20.0)]).unwrap();
        assert_eq!(one, rec(20.0));
        let two = mean_metrics(&[rec(20.0), rec(30.0)]).unwrap();
        assert_eq!(two.psnr_db, 25.0);
        assert_eq!(two.n_images, 2);
        assert!(mean_metrics(&[]).is_err());
    }
}
