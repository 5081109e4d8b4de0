//! PSNR and Gaussian-windowed SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kcore::RealGrid;

/// Value reported for identical images.
pub const PSNR_SENTINEL: f64 = 120.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub peak: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            peak: 255.0,
            ssim_window: 11,
            ssim_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0) {
            return Err(Error::Config(format!(
                "peak must be positive, got {}",
                self.peak
            )));
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(Error::Config(format!(
                "SSIM window must be odd and at least 3, got {}",
                self.ssim_window
            )));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.peak).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.peak).powi(2)
    }
}

pub fn mse(x: &RealGrid, y: &RealGrid) -> Result<f64> {
    x.check_shape(y)?;
    Ok(x.data
        .iter()
        .zip(&y.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64)
}

pub fn psnr(x: &RealGrid, y: &RealGrid, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    let err = mse(x, y)?;
    if err == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok((20.0 * (cfg.peak / err.sqrt()).log10()).min(PSNR_SENTINEL))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut w = Vec::with_capacity(size * size);
    for r in 0..size {
        for k in 0..size {
            let d2 = (r as f64 - c).powi(2) + (k as f64 - c).powi(2);
            w.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean SSIM over all fully contained windows (no padding).
pub fn ssim(x: &RealGrid, y: &RealGrid, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    x.check_shape(y)?;
    let n = cfg.ssim_window;
    if x.height < n || x.width < n {
        return Err(Error::shape(format!(
            "{}x{} image is smaller than the {n}x{n} SSIM window",
            x.height, x.width
        )));
    }
    let window = gaussian_window(n, cfg.ssim_sigma);
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let w = x.width;
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=x.height - n {
        for left in 0..=w - n {
            let (mut mx, mut my) = (0.0, 0.0);
            for r in 0..n {
                let base = (top + r) * w + left;
                for k in 0..n {
                    let g = window[r * n + k];
                    mx += g * x.data[base + k];
                    my += g * y.data[base + k];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for r in 0..n {
                let base = (top + r) * w + left;
                for k in 0..n {
                    let g = window[r * n + k];
                    let dx = x.data[base + k] - mx;
                    let dy = y.data[base + k] - my;
                    vx += g * dx * dx;
                    vy += g * dy * dy;
                    cxy += g * dx * dy;
                }
            }
            let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Maps `reference` onto `[0, peak]` by its own min/max and applies the same
/// affine map to `other`. A flat reference is only shifted.
pub fn rescale_pair(reference: &RealGrid, other: &RealGrid, peak: f64) -> (RealGrid, RealGrid) {
    let (lo, hi) = reference.min_max();
    let scale = if hi > lo { peak / (hi - lo) } else { 1.0 };
    let f = |v: f64| (v - lo) * scale;
    (reference.map(f), other.map(f))
}

/// PSNR and SSIM of `image` against `reference` after joint rescaling.
pub fn quality(reference: &RealGrid, image: &RealGrid, cfg: &MetricConfig) -> Result<(f64, f64)> {
    let (r, i) = rescale_pair(reference, image, cfg.peak);
    Ok((psnr(&r, &i, cfg)?, ssim(&r, &i, cfg)?))
}
