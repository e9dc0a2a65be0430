//! Image quality and bit-recovery metrics.

use serde::{Deserialize, Serialize};

use crate::adapters::PerceptualMetric;
use crate::detect::match_count;
use crate::error::{Error, Result};
use crate::keys::Message;
use crate::linops::gaussian_kernel;
use crate::signal::ImageGrid;

/// MSE floor; caps PSNR at 120 dB.
pub const MSE_FLOOR: f64 = 1e-12;
pub const PSNR_CAP: f64 = 120.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub psnr: f64,
    pub ssim: f64,
    /// Root mean per-pixel RGB distance, in 8-bit units.
    pub l2: f64,
    pub perceptual: f64,
}

fn check_shapes(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "image shapes differ: {:?} vs {:?}",
            a.tensor().dims(),
            b.tensor().dims()
        )))
    }
}

pub fn mse(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_shapes(a, b)?;
    let (av, bv) = (a.to_vec()?, b.to_vec()?);
    Ok(av.iter().zip(&bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    10.0 * (1.0 / mse.max(MSE_FLOOR)).log10()
}

/// Peak signal-to-noise ratio for `[0, 1]` images, in dB.
pub fn psnr(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub(crate) fn luminance(img: &ImageGrid) -> Result<Vec<f64>> {
    let v = img.to_vec()?;
    let n = img.height() * img.width();
    Ok((0..n)
        .map(|i| 0.299 * v[i] + 0.587 * v[n + i] + 0.114 * v[2 * n + i])
        .collect())
}

/// Valid-mode separable filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of the luma planes with an 11×11 Gaussian window (σ = 1.5),
/// evaluated over every fully contained window position.
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let (x, y) = (luminance(a)?, luminance(b)?);
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let sxx = filter_valid(&xx, h, w, &k);
    let syy = filter_valid(&yy, h, w, &k);
    let sxy = filter_valid(&xy, h, w, &k);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Root mean per-pixel Euclidean RGB distance in 8-bit units.
pub fn l2_distance(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    Ok((3.0 * mse(a, b)?).sqrt() * 255.0)
}

pub fn bit_accuracy(expected: &Message, decoded: &Message) -> Result<f64> {
    Ok(match_count(expected, decoded)? as f64 / expected.len() as f64)
}

pub fn quality_report(
    reference: &ImageGrid,
    candidate: &ImageGrid,
    perceptual: Option<&dyn PerceptualMetric>,
) -> Result<QualityReport> {
    Ok(QualityReport {
        psnr: psnr(reference, candidate)?,
        ssim: ssim(reference, candidate)?,
        l2: l2_distance(reference, candidate)?,
        perceptual: match perceptual {
            Some(m) => m.distance_value(reference, candidate)?,
            None => 0.0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    fn shifted(img: &ImageGrid, delta: f64) -> ImageGrid {
        ImageGrid::from_tensor((img.tensor() + delta).unwrap()).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ImageGrid::filled(8, 8, 0.5).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = shifted(&a, 1e-3f64.sqrt());
        assert!((psnr(&a, &b).unwrap() - 30.0).abs() < 1e-9);
        let c = shifted(&a, 0.1);
        assert!((psnr(&a, &c).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn shape_mismatch_is_invalid() {
        let a = ImageGrid::filled(8, 8, 0.5).unwrap();
        let b = ImageGrid::filled(8, 9, 0.5).unwrap();
        assert!(matches!(psnr(&a, &b), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let img = &corpus::synthetic_textures(1, 32, 3).unwrap()[0];
        assert!((ssim(img, img).unwrap() - 1.0).abs() < 1e-12);
        let binary = ImageGrid::from_fn(16, 16, |y, x, _| ((y / 2 + x / 3) % 2) as f64).unwrap();
        let inv = ImageGrid::from_tensor((binary.tensor().neg().unwrap() + 1.0).unwrap()).unwrap();
        assert!(ssim(&binary, &inv).unwrap() < 0.0);
        let small = ImageGrid::filled(10, 32, 0.2).unwrap();
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn bit_accuracy_counts() {
        let m = crate::keys::random_message(48, 1).unwrap();
        assert_eq!(bit_accuracy(&m, &m).unwrap(), 1.0);
        assert_eq!(bit_accuracy(&m, &m.complement()).unwrap(), 0.0);
        let mut v = m.values().to_vec();
        for x in v.iter_mut().take(12) {
            *x = -*x;
        }
        let partial = Message::new(v).unwrap();
        assert_eq!(bit_accuracy(&m, &partial).unwrap(), 0.75);
    }
}
