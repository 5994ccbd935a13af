//! Image quality metrics on display-referred `[0, 1]` images.

use thiserror::Error;

use crate::hdr::LdrImage;

pub const PSNR_CAP: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("image sizes differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("images of {0:?} are smaller than the 11x11 SSIM window")]
    TooSmall((usize, usize)),
}

fn check(a: &LdrImage, b: &LdrImage) -> Result<(), MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::DimensionMismatch { a: a.dims(), b: b.dims() });
    }
    Ok(())
}

pub fn mse(a: &LdrImage, b: &LdrImage) -> Result<f64, MetricError> {
    check(a, b)?;
    let n = a.pixels().len() * 3;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .flat_map(|(p, q)| (0..3).map(move |k| (p[k] as f64 - q[k] as f64).powi(2)))
        .sum();
    Ok(sum / n.max(1) as f64)
}

/// `10 log10(1 / MSE)`, capped at 99 dB.
pub fn psnr(a: &LdrImage, b: &LdrImage) -> Result<f64, MetricError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable Gaussian filter over valid positions only.
fn filter(img: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 window positions and the three channels.
pub fn ssim(a: &LdrImage, b: &LdrImage) -> Result<f64, MetricError> {
    check(a, b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::TooSmall((w, h)));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..3 {
        let x: Vec<f64> = a.pixels().iter().map(|p| p[k] as f64).collect();
        let y: Vec<f64> = b.pixels().iter().map(|p| p[k] as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = filter(&x, w, h, &g);
        let my = filter(&y, w, h, &g);
        let sxx = filter(&xx, w, h, &g);
        let syy = filter(&yy, w, h, &g);
        let sxy = filter(&xy, w, h, &g);
        for i in 0..mx.len() {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cxy = sxy[i] - mx[i] * my[i];
            let num = (2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cap_and_closed_form() {
        let a = LdrImage::filled(8, 8, [0.0; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = LdrImage::filled(8, 8, [0.1; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        let c = LdrImage::filled(4, 8, [0.1; 3]);
        assert!(psnr(&a, &c).is_err());
    }

    #[test]
    fn ssim_of_identical_is_one() {
        let px = (0..256).map(|i| [(i % 7) as f32 / 7.0, (i % 3) as f32 / 3.0, 0.5]).collect();
        let a = LdrImage::from_pixels(16, 16, px).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let small = LdrImage::filled(8, 8, [0.0; 3]);
        assert!(ssim(&small, &small).is_err());
    }
}
