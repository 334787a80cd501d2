//! Image quality metrics and the inference-time gain/offset correction.

use crate::error::{E4dgsError, Result};
use crate::image::Image;
pub use crate::losses::ssim;

pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in dB, capped at 99 for (near-)identical images.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(E4dgsError::ContractViolation(
            "psnr: images must share a shape".into(),
        ));
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse < 1e-12 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Per-channel affine correction in log-intensity space.
#[derive(Debug, Clone)]
pub struct ColorCorrection {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    /// True per channel when the predicted channel was constant and the gain
    /// defaulted to 1.
    pub degenerate: Vec<bool>,
}

/// Ordinary least squares fit of target_log ~ gain * pred_log + offset,
/// independently per channel.
pub fn fit_color_correction(pred_log: &Image, target_log: &Image) -> Result<ColorCorrection> {
    if !pred_log.same_shape(target_log) {
        return Err(E4dgsError::ContractViolation(
            "fit_color_correction: images must share a shape".into(),
        ));
    }
    let ch = pred_log.channels;
    let n = (pred_log.width * pred_log.height) as f64;
    let mut gain = vec![1.0; ch];
    let mut offset = vec![0.0; ch];
    let mut degenerate = vec![false; ch];
    for c in 0..ch {
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        for i in 0..pred_log.width * pred_log.height {
            let x = pred_log.data[i * ch + c];
            let y = target_log.data[i * ch + c];
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
        let var = sxx - sx * sx / n;
        if var <= 1e-12 {
            degenerate[c] = true;
            gain[c] = 1.0;
            offset[c] = (sy - sx) / n; // mean difference
        } else {
            gain[c] = (sxy - sx * sy / n) / var;
            offset[c] = (sy - gain[c] * sx) / n;
        }
    }
    Ok(ColorCorrection {
        gain,
        offset,
        degenerate,
    })
}

impl ColorCorrection {
    /// Applies the correction to a log image.
    pub fn apply_log(&self, pred_log: &Image) -> Image {
        let ch = pred_log.channels;
        let mut out = pred_log.clone();
        for i in 0..pred_log.width * pred_log.height {
            for c in 0..ch {
                out.data[i * ch + c] = self.gain[c] * pred_log.data[i * ch + c] + self.offset[c];
            }
        }
        out
    }

    /// Corrects in log space, exponentiates, and clamps to [0, 1] for metrics.
    pub fn apply_linear(&self, pred_log: &Image) -> Image {
        self.apply_log(pred_log).map(|v| v.exp().clamp(0.0, 1.0))
    }
}

/// Sum of squared residuals of `corrected(pred) - target` in log space.
pub fn log_residual(pred_log: &Image, target_log: &Image, corr: &ColorCorrection) -> f64 {
    let corrected = corr.apply_log(pred_log);
    corrected
        .data
        .iter()
        .zip(&target_log.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}
