//! Reconstruction accuracy (PSNR, SSIM) and uncertainty calibration (UCE).

use crate::error::{invalid, Result};
use crate::image::Image;

/// Bin count used for UCE unless a caller asks otherwise.
pub const UCE_BINS: usize = 10;

/// PSNR in dB against a peak of 1.0. Identical images give `+inf`.
pub fn psnr(x: &Image, x_hat: &Image) -> Result<f64> {
    psnr_with_peak(x, x_hat, 1.0)
}

pub fn psnr_with_peak(x: &Image, x_hat: &Image, peak: f64) -> Result<f64> {
    let mse = mse(x, x_hat)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn mse(x: &Image, x_hat: &Image) -> Result<f64> {
    x.check_same(x_hat)?;
    let s: f64 = x.pixels().iter().zip(x_hat.pixels()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x.len() as f64)
}

/// Per-pixel squared residual.
pub fn squared_error(x: &Image, x_hat: &Image) -> Result<Image> {
    x.zip_map(x_hat, |a, b| (a - b) * (a - b))
}

/// Formats a metric for CSV output, with `inf` for the identical-image PSNR.
pub fn format_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

const SSIM_WIN: usize = 7;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WIN / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WIN * SSIM_WIN)
        .map(|i| {
            let (r, c) = ((i / SSIM_WIN) as f64 - half, (i % SSIM_WIN) as f64 - half);
            (-(r * r + c * c) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean local SSIM over every fully contained 7x7 Gaussian window
/// (σ = 1.5, dynamic range 1).
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    x.check_same(y)?;
    let (h, w) = x.dims();
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(invalid!("SSIM needs at least {SSIM_WIN}x{SSIM_WIN}, got {h}x{w}"));
    }
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - SSIM_WIN {
        for c0 in 0..=w - SSIM_WIN {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..SSIM_WIN {
                for j in 0..SSIM_WIN {
                    let g = win[i * SSIM_WIN + j];
                    let (a, b) = (x.get(r0 + i, c0 + j), y.get(r0 + i, c0 + j));
                    mx += g * a;
                    my += g * b;
                    xx += g * a * a;
                    yy += g * b * b;
                    xy += g * a * b;
                }
            }
            let vx = xx - mx * mx;
            let vy = yy - my * my;
            let cov = xy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBin {
    pub index: usize,
    pub count: usize,
    /// Mean squared error of the bin's pixels.
    pub mean_error: f64,
    /// Mean predicted variance of the bin's pixels.
    pub mean_uncertainty: f64,
}

/// Equal-width bins over `[0, max(uncertainty)]`; empty bins are omitted.
///
/// An all-zero uncertainty field yields a single bin.
pub fn calibration_bins(sq_error: &Image, uncertainty: &Image, k: usize) -> Result<Vec<CalibrationBin>> {
    sq_error.check_same(uncertainty)?;
    if k == 0 {
        return Err(invalid!("UCE needs at least one bin"));
    }
    if uncertainty.pixels().iter().any(|&u| u < 0.0) {
        return Err(invalid!("negative uncertainty"));
    }
    let max = uncertainty.max();
    let k = if max > 0.0 { k } else { 1 };
    let mut sums = vec![(0usize, 0.0, 0.0); k];
    for (&e, &u) in sq_error.pixels().iter().zip(uncertainty.pixels()) {
        let idx = if max > 0.0 { ((u / max * k as f64) as usize).min(k - 1) } else { 0 };
        let s = &mut sums[idx];
        s.0 += 1;
        s.1 += e;
        s.2 += u;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .filter(|(_, s)| s.0 > 0)
        .map(|(index, (count, e, u))| CalibrationBin {
            index,
            count,
            mean_error: e / count as f64,
            mean_uncertainty: u / count as f64,
        })
        .collect())
}

/// Uncertainty calibration error: bin-size-weighted mean of
/// `|mean error - mean uncertainty|`.
pub fn uce(sq_error: &Image, uncertainty: &Image, k: usize) -> Result<f64> {
    let m = sq_error.len() as f64;
    Ok(calibration_bins(sq_error, uncertainty, k)?
        .iter()
        .map(|b| b.count as f64 / m * (b.mean_error - b.mean_uncertainty).abs())
        .sum())
}
