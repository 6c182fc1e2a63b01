//! Reconstruction quality (MSE, PSNR, SSIM) and communication accounting.

use crate::error::{Error, Result};

/// Default SSIM window side.
pub const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Dynamic range of pixel values.
pub const DATA_RANGE: f64 = 1.0;

/// Ground-truth and reconstructed square images with values in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct ImagePair<'a> {
    pub truth: &'a [f64],
    pub recon: &'a [f64],
    pub side: usize,
}

impl<'a> ImagePair<'a> {
    pub fn new(truth: &'a [f64], recon: &'a [f64], side: usize) -> Result<Self> {
        if truth.len() != recon.len() || truth.len() != side * side {
            return Err(Error::InvalidInput(format!(
                "image pair lengths {} / {} do not match side {side}",
                truth.len(),
                recon.len()
            )));
        }
        let in_range = |v: &f64| (0.0..=1.0).contains(v);
        if !truth.iter().all(in_range) || !recon.iter().all(in_range) {
            return Err(Error::InvalidInput(
                "pixel values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { truth, recon, side })
    }
}

pub fn mse(p: &ImagePair) -> f64 {
    p.truth
        .iter()
        .zip(p.recon)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / p.truth.len() as f64
}

/// `10 log10(MAX² / MSE)`; `f64::INFINITY` when the images are identical.
pub fn psnr(p: &ImagePair) -> f64 {
    psnr_from_mse(mse(p))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (DATA_RANGE * DATA_RANGE / mse).log10()
    }
}

/// Mean SSIM over all `window × window` box windows (sample covariance).
pub fn ssim(p: &ImagePair, window: usize) -> Result<f64> {
    if window == 0 || window.is_multiple_of(2) || window > p.side {
        return Err(Error::InvalidInput(format!(
            "SSIM window must be odd and at most {}, got {window}",
            p.side
        )));
    }
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let n = (window * window) as f64;
    let cov_norm = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    let s = p.side;
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=(s - window) {
        for left in 0..=(s - window) {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in top..top + window {
                for c in left..left + window {
                    let (x, y) = (p.truth[r * s + c], p.recon[r * s + c]);
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = (sxx / n - mx * mx) * cov_norm;
            let vy = (syy / n - my * my) * cov_norm;
            let vxy = (sxy / n - mx * my) * cov_norm;
            total += ((2.0 * mx * my + c1) * (2.0 * vxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `100 · (1 − defended / baseline)`; negative when the defense costs more.
pub fn comm_reduction(defended: usize, baseline: usize) -> Result<f64> {
    if baseline == 0 {
        return Err(Error::InvalidInput(
            "baseline communication must be positive".into(),
        ));
    }
    Ok(100.0 * (1.0 - defended as f64 / baseline as f64))
}
