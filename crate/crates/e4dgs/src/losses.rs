//! Loss terms and the learnable contrast threshold.
//!
//! Event supervision compares signed count maps: the ground-truth map comes
//! from accumulated events, the predicted one is (L_curr - L_prev) / C_hat
//! with C_hat = softplus(theta_C) learned jointly. The Charbonnier
//! reconstruction term is regularized by anisotropic L1 total variation on
//! the predicted event frame (the log-difference image). RGB supervision and
//! the legacy event-integral loss use the L1 + D-SSIM form.

use crate::error::{E4dgsError, Result};
use crate::image::Image;
use crate::math::{sigmoid, softplus, softplus_inv};

/// Contrast threshold parameterized through softplus so it stays positive.
#[derive(Debug, Clone, Copy)]
pub struct LearnableThreshold {
    pub theta: f64,
}

impl LearnableThreshold {
    /// Builds the raw parameter so that `value()` equals `c0` exactly.
    pub fn from_threshold(c0: f64) -> Result<Self> {
        if c0 <= 0.0 || !c0.is_finite() {
            return Err(E4dgsError::InvalidArgument(format!(
                "contrast threshold must be positive and finite, got {c0}"
            )));
        }
        Ok(Self {
            theta: softplus_inv(c0),
        })
    }

    pub fn value(&self) -> f64 {
        softplus(self.theta)
    }

    /// d(softplus)/d(theta).
    pub fn d_value_d_theta(&self) -> f64 {
        sigmoid(self.theta)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_recon: f64,
    pub lambda_tv: f64,
    pub lambda_rgb: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_recon: 1.0,
            lambda_tv: 0.005,
            lambda_rgb: 1.0,
            epsilon: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReconLossResult {
    pub loss: f64,
    pub d_l_prev: Image,
    pub d_l_curr: Image,
    pub d_theta: f64,
}

/// Charbonnier loss between the ground-truth count map and the predicted
/// count map (L_curr - L_prev) / C_hat, with gradients for both log-images
/// and the raw threshold parameter.
pub fn recon_loss(
    n_gt: &Image,
    l_prev: &Image,
    l_curr: &Image,
    threshold: &LearnableThreshold,
    epsilon: f64,
) -> Result<ReconLossResult> {
    if !n_gt.same_shape(l_prev) || !n_gt.same_shape(l_curr) {
        return Err(E4dgsError::ContractViolation(
            "recon_loss: count map and log-images must share a shape".into(),
        ));
    }
    if epsilon <= 0.0 {
        return Err(E4dgsError::InvalidArgument(
            "recon_loss: epsilon must be positive".into(),
        ));
    }
    let c = threshold.value();
    let n = n_gt.data.len() as f64;
    let mut loss = 0.0;
    let mut d_l_prev = Image::zeros(n_gt.width, n_gt.height, n_gt.channels);
    let mut d_l_curr = d_l_prev.clone();
    let mut d_c = 0.0;
    for i in 0..n_gt.data.len() {
        let pred = (l_curr.data[i] - l_prev.data[i]) / c;
        let diff = n_gt.data[i] - pred;
        let root = (diff * diff + epsilon * epsilon).sqrt();
        loss += root;
        // dL/dpred, already including the 1/N of the mean.
        let d_pred = -diff / root / n;
        d_l_curr.data[i] = d_pred / c;
        d_l_prev.data[i] = -d_pred / c;
        d_c += d_pred * (-pred / c);
    }
    Ok(ReconLossResult {
        loss: loss / n,
        d_l_prev,
        d_l_curr,
        d_theta: d_c * threshold.d_value_d_theta(),
    })
}

/// Anisotropic L1 total variation, averaged over valid neighbor pairs.
pub fn tv_loss(frame: &Image) -> Result<(f64, Image)> {
    if frame.channels != 1 {
        return Err(E4dgsError::ContractViolation(
            "tv_loss expects a single-channel frame".into(),
        ));
    }
    let (w, h) = (frame.width, frame.height);
    if w < 2 && h < 2 {
        return Err(E4dgsError::InvalidArgument(
            "tv_loss needs at least one neighbor pair".into(),
        ));
    }
    let normalizer = (h * (w - 1) + (h - 1) * w) as f64;
    let mut total = 0.0;
    let mut grad = Image::zeros(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let d = frame.data[i + 1] - frame.data[i];
                total += d.abs();
                let s = d.signum() / normalizer;
                grad.data[i + 1] += s;
                grad.data[i] -= s;
            }
            if y + 1 < h {
                let d = frame.data[i + w] - frame.data[i];
                total += d.abs();
                let s = d.signum() / normalizer;
                grad.data[i + w] += s;
                grad.data[i] -= s;
            }
        }
    }
    Ok((total / normalizer, grad))
}

#[derive(Debug, Clone)]
pub struct EventLossResult {
    pub loss: f64,
    pub recon: f64,
    pub tv: f64,
    pub d_l_prev: Image,
    pub d_l_curr: Image,
    pub d_theta: f64,
}

/// Total event supervision: lambda_recon * Charbonnier + lambda_tv * TV,
/// with TV applied to the predicted event frame L_curr - L_prev.
pub fn event_loss(
    n_gt: &Image,
    l_prev: &Image,
    l_curr: &Image,
    threshold: &LearnableThreshold,
    weights: &LossWeights,
) -> Result<EventLossResult> {
    let recon = recon_loss(n_gt, l_prev, l_curr, threshold, weights.epsilon)?;
    let pred_frame = Image {
        width: l_curr.width,
        height: l_curr.height,
        channels: 1,
        data: l_curr
            .data
            .iter()
            .zip(&l_prev.data)
            .map(|(c, p)| c - p)
            .collect(),
    };
    let (tv, tv_grad) = tv_loss(&pred_frame)?;
    let mut d_l_prev = recon.d_l_prev.clone();
    let mut d_l_curr = recon.d_l_curr.clone();
    for i in 0..d_l_prev.data.len() {
        d_l_prev.data[i] = weights.lambda_recon * d_l_prev.data[i] - weights.lambda_tv * tv_grad.data[i];
        d_l_curr.data[i] = weights.lambda_recon * d_l_curr.data[i] + weights.lambda_tv * tv_grad.data[i];
    }
    Ok(EventLossResult {
        loss: weights.lambda_recon * recon.loss + weights.lambda_tv * tv,
        recon: recon.loss,
        tv,
        d_l_prev,
        d_l_curr,
        d_theta: weights.lambda_recon * recon.d_theta,
    })
}

// --- SSIM ----------------------------------------------------------------

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable 11x11 Gaussian blur with zero padding. The kernel is symmetric,
/// so this is also its own adjoint.
fn conv_gauss(plane: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xi = x as isize + k as isize - r as isize;
                if xi >= 0 && (xi as usize) < w {
                    acc += kv * plane[y * w + xi as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yi = y as isize + k as isize - r as isize;
                if yi >= 0 && (yi as usize) < h {
                    acc += kv * tmp[yi as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM over all pixels and channels (dynamic range 1).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (v, _) = ssim_with_grad(a, b, false)?;
    Ok(v)
}

/// Mean SSIM plus, optionally, the gradient w.r.t. the first image.
pub fn ssim_with_grad(pred: &Image, target: &Image, want_grad: bool) -> Result<(f64, Image)> {
    if !pred.same_shape(target) {
        return Err(E4dgsError::ContractViolation(
            "ssim: images must share a shape".into(),
        ));
    }
    let (w, h, ch) = (pred.width, pred.height, pred.channels);
    let kernel = gaussian_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n_pix = (w * h) as f64;
    let mut total = 0.0;
    let mut grad = Image::zeros(w, h, if want_grad { ch } else { 1 });

    for c in 0..ch {
        let x: Vec<f64> = (0..w * h).map(|i| pred.data[i * ch + c]).collect();
        let y: Vec<f64> = (0..w * h).map(|i| target.data[i * ch + c]).collect();
        let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
        let y2: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mu1 = conv_gauss(&x, w, h, &kernel);
        let mu2 = conv_gauss(&y, w, h, &kernel);
        let m_x2 = conv_gauss(&x2, w, h, &kernel);
        let m_y2 = conv_gauss(&y2, w, h, &kernel);
        let m_xy = conv_gauss(&xy, w, h, &kernel);

        let mut g_mu1 = vec![0.0; w * h];
        let mut g_x2 = vec![0.0; w * h];
        let mut g_xy = vec![0.0; w * h];
        for i in 0..w * h {
            let a1 = 2.0 * mu1[i] * mu2[i] + c1;
            let a2 = 2.0 * (m_xy[i] - mu1[i] * mu2[i]) + c2;
            let b1 = mu1[i] * mu1[i] + mu2[i] * mu2[i] + c1;
            let b2 = m_x2[i] - mu1[i] * mu1[i] + m_y2[i] - mu2[i] * mu2[i] + c2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if want_grad {
                // Upstream weight of the mean over pixels and channels.
                let up = 1.0 / (n_pix * ch as f64);
                let inv = 1.0 / (b1 * b2);
                let d_mu1 = up
                    * ((2.0 * mu2[i] * a2 + a1 * (-2.0 * mu2[i])) * inv
                        - s * (2.0 * mu1[i] / b1 - 2.0 * mu1[i] / b2));
                g_mu1[i] = d_mu1;
                g_x2[i] = up * (-s / b2);
                g_xy[i] = up * (2.0 * a1 * inv);
            }
        }
        if want_grad {
            let back_mu1 = conv_gauss(&g_mu1, w, h, &kernel);
            let back_x2 = conv_gauss(&g_x2, w, h, &kernel);
            let back_xy = conv_gauss(&g_xy, w, h, &kernel);
            for i in 0..w * h {
                grad.data[i * ch + c] = back_mu1[i] + 2.0 * x[i] * back_x2[i] + y[i] * back_xy[i];
            }
        }
    }
    Ok((total / (n_pix * ch as f64), grad))
}

/// lambda * L1 + (1 - lambda) * D-SSIM, with gradient w.r.t. `pred`.
pub fn l1_dssim_loss(pred: &Image, target: &Image, lambda_l1: f64) -> Result<(f64, Image)> {
    if !pred.same_shape(target) {
        return Err(E4dgsError::ContractViolation(
            "l1_dssim_loss: images must share a shape".into(),
        ));
    }
    let n = pred.data.len() as f64;
    let mut l1 = 0.0;
    let mut grad = Image::zeros(pred.width, pred.height, pred.channels);
    for i in 0..pred.data.len() {
        let d = pred.data[i] - target.data[i];
        l1 += d.abs();
        grad.data[i] = lambda_l1 * d.signum() / n;
    }
    l1 /= n;
    let (s, s_grad) = ssim_with_grad(pred, target, true)?;
    let d_ssim = (1.0 - s) / 2.0;
    for i in 0..grad.data.len() {
        grad.data[i] += (1.0 - lambda_l1) * (-0.5) * s_grad.data[i];
    }
    Ok((lambda_l1 * l1 + (1.0 - lambda_l1) * d_ssim, grad))
}

/// Legacy event-integral loss on accumulated frames.
pub fn esi_loss(pred: &Image, gt: &Image, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(E4dgsError::InvalidArgument(
            "esi_loss: lambda must lie in [0, 1]".into(),
        ));
    }
    Ok(l1_dssim_loss(pred, gt, lambda)?.0)
}

pub const RGB_L1_WEIGHT: f64 = 0.8;

/// Photometric RGB loss: 0.8 L1 + 0.2 D-SSIM, with gradient w.r.t. render.
pub fn rgb_loss(render: &Image, target: &Image) -> Result<(f64, Image)> {
    l1_dssim_loss(render, target, RGB_L1_WEIGHT)
}

/// L_Fusion = event loss + lambda_rgb * rgb loss (scalar combination).
pub fn fusion_loss(event: f64, rgb: f64, lambda_rgb: f64) -> f64 {
    event + lambda_rgb * rgb
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(w: usize, h: usize, ch: usize, seed: u64, lo: f64, hi: f64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image {
            width: w,
            height: h,
            channels: ch,
            data: (0..w * h * ch).map(|_| rng.gen_range(lo..hi)).collect(),
        }
    }

    #[test]
    fn threshold_round_trips_and_stays_positive() {
        let t = LearnableThreshold::from_threshold(0.15).unwrap();
        assert_relative_eq!(t.value(), 0.15, epsilon = 1e-9);
        let t2 = LearnableThreshold::from_threshold(0.2).unwrap();
        assert_relative_eq!(t2.value(), 0.2, epsilon = 1e-9);
        assert!(LearnableThreshold { theta: -50.0 }.value() > 0.0);
        assert!(LearnableThreshold::from_threshold(-1.0).is_err());
    }

    #[test]
    fn recon_loss_floor_is_epsilon() {
        // Perfect prediction: the Charbonnier floor is exactly epsilon.
        let thr = LearnableThreshold::from_threshold(0.15).unwrap();
        let c = thr.value();
        let l_prev = rand_image(8, 8, 1, 1, -1.0, 1.0);
        let mut l_curr = l_prev.clone();
        let mut n_gt = Image::zeros(8, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..64 {
            let count = rng.gen_range(-3i32..=3) as f64;
            n_gt.data[i] = count;
            l_curr.data[i] = l_prev.data[i] + count * c;
        }
        let r = recon_loss(&n_gt, &l_prev, &l_curr, &thr, 1e-3).unwrap();
        assert!((r.loss - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn recon_loss_charbonnier_limit() {
        // Uniform gap of one count with epsilon -> 0 approaches 1.
        let thr = LearnableThreshold::from_threshold(0.15).unwrap();
        let l_prev = Image::zeros(4, 4, 1);
        let l_curr = l_prev.clone();
        let n_gt = Image {
            width: 4,
            height: 4,
            channels: 1,
            data: vec![1.0; 16],
        };
        let r = recon_loss(&n_gt, &l_prev, &l_curr, &thr, 1e-9).unwrap();
        assert_relative_eq!(r.loss, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn recon_loss_gradients_match_finite_differences() {
        let thr = LearnableThreshold::from_threshold(0.15).unwrap();
        let l_prev = rand_image(8, 8, 1, 3, -0.5, 0.5);
        let l_curr = rand_image(8, 8, 1, 4, -0.5, 0.5);
        let mut n_gt = rand_image(8, 8, 1, 5, -3.0, 3.0);
        for v in &mut n_gt.data {
            *v = v.round();
        }
        let r = recon_loss(&n_gt, &l_prev, &l_curr, &thr, 1e-3).unwrap();
        let h = 1e-6;
        // theta
        let lp = recon_loss(&n_gt, &l_prev, &l_curr, &LearnableThreshold { theta: thr.theta + h }, 1e-3)
            .unwrap()
            .loss;
        let lm = recon_loss(&n_gt, &l_prev, &l_curr, &LearnableThreshold { theta: thr.theta - h }, 1e-3)
            .unwrap()
            .loss;
        let fd = (lp - lm) / (2.0 * h);
        assert_relative_eq!(r.d_theta, fd, max_relative = 1e-3);
        // a few image pixels
        for &i in &[0usize, 17, 40, 63] {
            let mut p = l_curr.clone();
            p.data[i] += h;
            let mut m = l_curr.clone();
            m.data[i] -= h;
            let fd = (recon_loss(&n_gt, &l_prev, &p, &thr, 1e-3).unwrap().loss
                - recon_loss(&n_gt, &l_prev, &m, &thr, 1e-3).unwrap().loss)
                / (2.0 * h);
            assert_relative_eq!(r.d_l_curr.data[i], fd, max_relative = 1e-3);

            let mut p = l_prev.clone();
            p.data[i] += h;
            let mut m = l_prev.clone();
            m.data[i] -= h;
            let fd = (recon_loss(&n_gt, &p, &l_curr, &thr, 1e-3).unwrap().loss
                - recon_loss(&n_gt, &m, &l_curr, &thr, 1e-3).unwrap().loss)
                / (2.0 * h);
            assert_relative_eq!(r.d_l_prev.data[i], fd, max_relative = 1e-3);
        }
    }

    #[test]
    fn recon_loss_is_gain_invariant() {
        // A global gain g on linear intensity adds log(g) to both log-images,
        // so the predicted count map and hence the loss are unchanged.
        let thr = LearnableThreshold::from_threshold(0.15).unwrap();
        let l_prev = rand_image(8, 8, 1, 6, -0.5, 0.5);
        let l_curr = rand_image(8, 8, 1, 7, -0.5, 0.5);
        let n_gt = rand_image(8, 8, 1, 8, -2.0, 2.0);
        let base = recon_loss(&n_gt, &l_prev, &l_curr, &thr, 1e-3).unwrap().loss;
        let shift = 3.7f64.ln();
        let lp = l_prev.map(|v| v + shift);
        let lc = l_curr.map(|v| v + shift);
        let shifted = recon_loss(&n_gt, &lp, &lc, &thr, 1e-3).unwrap().loss;
        assert!((base - shifted).abs() <= 1e-6);
    }

    #[test]
    fn tv_loss_oracles() {
        let (w, h) = (7, 5);
        let constant = Image {
            width: w,
            height: h,
            channels: 1,
            data: vec![0.3; w * h],
        };
        assert_eq!(tv_loss(&constant).unwrap().0, 0.0);

        // Step edge between columns 2 and 3, height 0.8: one jump per row.
        let mut step = Image::zeros(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                step.data[y * w + x] = if x >= 3 { 0.8 } else { 0.0 };
            }
        }
        let normalizer = (h * (w - 1) + (h - 1) * w) as f64;
        assert_relative_eq!(
            tv_loss(&step).unwrap().0,
            0.8 * h as f64 / normalizer,
            epsilon = 1e-12
        );

        // Brute-force oracle on a random frame.
        let frame = rand_image(w, h, 1, 9, -1.0, 1.0);
        let mut expect = 0.0;
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    expect += (frame.data[y * w + x + 1] - frame.data[y * w + x]).abs();
                }
                if y + 1 < h {
                    expect += (frame.data[(y + 1) * w + x] - frame.data[y * w + x]).abs();
                }
            }
        }
        assert_relative_eq!(tv_loss(&frame).unwrap().0, expect / normalizer, epsilon = 1e-12);
    }

    #[test]
    fn tv_loss_gradient_matches_finite_differences() {
        let frame = rand_image(8, 8, 1, 10, -1.0, 1.0);
        let (_, grad) = tv_loss(&frame).unwrap();
        let h = 1e-7;
        for &i in &[0usize, 9, 35, 63] {
            let mut p = frame.clone();
            p.data[i] += h;
            let mut m = frame.clone();
            m.data[i] -= h;
            let fd = (tv_loss(&p).unwrap().0 - tv_loss(&m).unwrap().0) / (2.0 * h);
            assert_relative_eq!(grad.data[i], fd, max_relative = 1e-3);
        }
    }

    #[test]
    fn event_loss_composition() {
        let thr = LearnableThreshold::from_threshold(0.15).unwrap();
        let l_prev = rand_image(8, 8, 1, 11, -0.5, 0.5);
        let l_curr = rand_image(8, 8, 1, 12, -0.5, 0.5);
        let n_gt = rand_image(8, 8, 1, 13, -2.0, 2.0);
        let mut weights = LossWeights {
            lambda_tv: 0.0,
            ..Default::default()
        };
        let r0 = event_loss(&n_gt, &l_prev, &l_curr, &thr, &weights).unwrap();
        let recon = recon_loss(&n_gt, &l_prev, &l_curr, &thr, weights.epsilon).unwrap();
        assert_relative_eq!(r0.loss, recon.loss, epsilon = 1e-15);

        weights.lambda_recon = 2.0;
        let r2 = event_loss(&n_gt, &l_prev, &l_curr, &thr, &weights).unwrap();
        assert_relative_eq!(r2.loss, 2.0 * recon.loss, epsilon = 1e-15);
    }

    #[test]
    fn event_loss_gradients_match_finite_differences() {
        let thr = LearnableThreshold::from_threshold(0.15).unwrap();
        let l_prev = rand_image(8, 8, 1, 14, -0.5, 0.5);
        let l_curr = rand_image(8, 8, 1, 15, -0.5, 0.5);
        let n_gt = rand_image(8, 8, 1, 16, -2.0, 2.0);
        let weights = LossWeights::default();
        let r = event_loss(&n_gt, &l_prev, &l_curr, &thr, &weights).unwrap();
        let h = 1e-6;
        for &i in &[3usize, 20, 44, 60] {
            let mut p = l_curr.clone();
            p.data[i] += h;
            let mut m = l_curr.clone();
            m.data[i] -= h;
            let fd = (event_loss(&n_gt, &l_prev, &p, &thr, &weights).unwrap().loss
                - event_loss(&n_gt, &l_prev, &m, &thr, &weights).unwrap().loss)
                / (2.0 * h);
            assert_relative_eq!(r.d_l_curr.data[i], fd, max_relative = 1e-3);
        }
    }

    /// Brute-force non-separable SSIM used as the reference oracle.
    fn ssim_reference(a: &Image, b: &Image) -> f64 {
        let (w, h) = (a.width, a.height);
        let kernel = gaussian_kernel();
        let r = SSIM_WINDOW / 2;
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let mut mu1 = 0.0;
                let mut mu2 = 0.0;
                let mut m11 = 0.0;
                let mut m22 = 0.0;
                let mut m12 = 0.0;
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let yy = y as isize + ky as isize - r as isize;
                        let xx = x as isize + kx as isize - r as isize;
                        let wgt = kernel[ky] * kernel[kx];
                        let (va, vb) = if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                            let i = yy as usize * w + xx as usize;
                            (a.data[i], b.data[i])
                        } else {
                            (0.0, 0.0)
                        };
                        mu1 += wgt * va;
                        mu2 += wgt * vb;
                        m11 += wgt * va * va;
                        m22 += wgt * vb * vb;
                        m12 += wgt * va * vb;
                    }
                }
                let s1 = m11 - mu1 * mu1;
                let s2 = m22 - mu2 * mu2;
                let s12 = m12 - mu1 * mu2;
                total += ((2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2))
                    / ((mu1 * mu1 + mu2 * mu2 + c1) * (s1 + s2 + c2));
            }
        }
        total / (w * h) as f64
    }

    #[test]
    fn ssim_matches_reference_formula() {
        let a = rand_image(16, 16, 1, 17, 0.0, 1.0);
        let b = rand_image(16, 16, 1, 18, 0.0, 1.0);
        assert_relative_eq!(ssim(&a, &b).unwrap(), ssim_reference(&a, &b), epsilon = 1e-12);
        // Symmetry and self-similarity.
        assert_relative_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap(), epsilon = 1e-12);
        assert_relative_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let a = rand_image(8, 8, 1, 19, 0.1, 0.9);
        let b = rand_image(8, 8, 1, 20, 0.1, 0.9);
        let (_, grad) = ssim_with_grad(&a, &b, true).unwrap();
        let h = 1e-6;
        for &i in &[0usize, 13, 27, 50, 63] {
            let mut p = a.clone();
            p.data[i] += h;
            let mut m = a.clone();
            m.data[i] -= h;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / (2.0 * h);
            assert_relative_eq!(grad.data[i], fd, max_relative = 1e-3);
        }
    }

    #[test]
    fn esi_and_rgb_losses() {
        let a = rand_image(16, 16, 1, 21, 0.0, 1.0);
        let b = rand_image(16, 16, 1, 22, 0.0, 1.0);
        assert_relative_eq!(esi_loss(&a, &a, 0.5).unwrap(), 0.0, epsilon = 1e-12);
        // Pure L1 at lambda = 1.
        let l1: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 256.0;
        assert_relative_eq!(esi_loss(&a, &b, 1.0).unwrap(), l1, epsilon = 1e-12);

        let (rl, _) = rgb_loss(&a, &a).unwrap();
        assert_relative_eq!(rl, 0.0, epsilon = 1e-12);
        let (rl, _) = rgb_loss(&a, &b).unwrap();
        assert!(rl > 0.0);
        // Fusion dominates event-only whenever the RGB term is nonnegative.
        assert!(fusion_loss(0.3, rl, 1.0) >= 0.3);
        assert_relative_eq!(fusion_loss(0.3, rl, 0.0), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn rgb_loss_gradient_matches_finite_differences() {
        let a = rand_image(8, 8, 3, 23, 0.1, 0.9);
        let b = rand_image(8, 8, 3, 24, 0.1, 0.9);
        let (_, grad) = rgb_loss(&a, &b).unwrap();
        let h = 1e-6;
        for &i in &[0usize, 31, 77, 130, 191] {
            let mut p = a.clone();
            p.data[i] += h;
            let mut m = a.clone();
            m.data[i] -= h;
            let fd = (rgb_loss(&p, &b).unwrap().0 - rgb_loss(&m, &b).unwrap().0) / (2.0 * h);
            assert_relative_eq!(grad.data[i], fd, max_relative = 1e-3);
        }
    }
}
