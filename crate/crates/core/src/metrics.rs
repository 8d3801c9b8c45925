//! Reconstruction fidelity metrics. PSNR and SSIM operate on values in
//! [0, 1]; `to_unit_range` maps the pipeline's [-1, 1] images there.

use crate::error::{Result, SgaError};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_C1: f64 = 1e-4; // (0.01)^2
const SSIM_C2: f64 = 9e-4; // (0.03)^2
const SSIM_WINDOW: usize = 8;

pub fn to_unit_range(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = (*v + 1.0) / 2.0;
    }
    out
}

/// ||x - x_hat||^2 / ||x||^2.
pub fn metric_nmse(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if !x.same_shape(x_hat) {
        return Err(SgaError::shape("nmse shapes disagree"));
    }
    let denom = x.norm().powi(2);
    if denom == 0.0 {
        return Err(SgaError::UndefinedMetric(
            "nmse undefined for zero signal".to_string(),
        ));
    }
    Ok(x.sub(x_hat)?.norm().powi(2) / denom)
}

/// 10 log10(1 / MSE) on [0,1] values, capped at 99 dB.
pub fn metric_psnr(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if !x.same_shape(x_hat) {
        return Err(SgaError::shape("psnr shapes disagree"));
    }
    let mse = x.sub(x_hat)?.norm().powi(2) / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Uniform 8x8 windows at stride 8, averaged over windows and channels.
pub fn metric_ssim(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if !x.same_shape(x_hat) {
        return Err(SgaError::shape("ssim shapes disagree"));
    }
    if x.rank() != 3 {
        return Err(SgaError::shape("ssim expects h*w*c images"));
    }
    let (h, w, c) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(SgaError::shape("image smaller than the SSIM window"));
    }
    let mut total = 0.0;
    let mut windows = 0usize;
    let m = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    for ch in 0..c {
        let mut wy = 0;
        while wy + SSIM_WINDOW <= h {
            let mut wx = 0;
            while wx + SSIM_WINDOW <= w {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let idx = ((wy + dy) * w + wx + dx) * c + ch;
                        let a = x.data()[idx];
                        let b = x_hat.data()[idx];
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let mx = sx / m;
                let my = sy / m;
                let vx = sxx / m - mx * mx;
                let vy = syy / m - my * my;
                let cov = sxy / m - mx * my;
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                windows += 1;
                wx += SSIM_WINDOW;
            }
            wy += SSIM_WINDOW;
        }
    }
    Ok(total / windows as f64)
}
