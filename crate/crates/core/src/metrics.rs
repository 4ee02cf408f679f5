//! Evaluation metrics on the 255 intensity scale: entropy, average
//! gradient, structural similarity, visual information fidelity, and peak
//! signal-to-noise ratio, plus the per-pair report.
//!
//! These are direct-loop implementations kept deliberately independent of
//! the differentiable loss path; the two routes cross-check each other in
//! the test suite.

use crate::raster::{gaussian_taps, Image};
use crate::{Error, Result};

/// PSNR reported for (near-)zero mean squared error.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

const VIF_WINDOW: usize = 9;
const VIF_SIGMA: f64 = 1.8;
const VIF_LEVELS: usize = 4;
const VIF_SIGMA_NSQ: f64 = 2.0;
/// Smallest image side on which a pyramid level is evaluated.
const VIF_MIN_SIDE: usize = 4;

/// Five metric values for one fused result, their mean, and a flag for a
/// VIF pyramid cut short by small images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub en: f64,
    pub ag: f64,
    pub ssim: f64,
    pub vif: f64,
    pub psnr: f64,
    pub mean: f64,
    pub vif_truncated: bool,
}

/// VIF value together with the number of pyramid levels actually used.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VifValue {
    pub value: f64,
    pub levels: usize,
}

// ---------------------------------------------------------------------------
// Individual metrics
// ---------------------------------------------------------------------------

/// Shannon entropy in bits over the 256-level histogram.
pub fn entropy(image: &Image) -> f64 {
    let mut hist = [0u64; 256];
    for &b in &image.to_bytes() {
        hist[b as usize] += 1;
    }
    let n = (image.h() * image.w()) as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Mean forward-difference gradient magnitude on the 255 scale; the last
/// row and column contribute zero differences.
pub fn average_gradient(image: &Image) -> Result<f64> {
    let (h, w) = (image.h(), image.w());
    if h < 2 || w < 2 {
        return Err(Error::arg(format!(
            "average gradient needs at least 2x2 pixels, got {h}x{w}"
        )));
    }
    let mut acc = 0.0;
    for r in 0..h {
        for c in 0..w {
            let v = image.get(r, c) * 255.0;
            let dx = if c + 1 < w { image.get(r, c + 1) * 255.0 - v } else { 0.0 };
            let dy = if r + 1 < h { image.get(r + 1, c) * 255.0 - v } else { 0.0 };
            acc += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    Ok(acc / (h * w) as f64)
}

/// Valid-mode separable filtering: rows then columns.
fn filter_valid(data: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let src = &data[r * w..(r + 1) * w];
        let dst = &mut rows[r * ow..(r + 1) * ow];
        for (c, out) in dst.iter_mut().enumerate() {
            *out = taps.iter().zip(&src[c..c + k]).map(|(&t, &v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for c in 0..ow {
        for r in 0..oh {
            out[r * ow + c] = taps
                .iter()
                .enumerate()
                .map(|(i, &t)| t * rows[(r + i) * ow + c])
                .sum();
        }
    }
    (out, oh, ow)
}

/// Mean local SSIM over all complete 11x11 Gaussian windows, 255 scale.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_dims(a, b, "ssim")?;
    let (h, w) = (a.h(), a.w());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::arg(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let x: Vec<f64> = a.data().iter().map(|&v| v * 255.0).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v * 255.0).collect();
    let xx: Vec<f64> = x.iter().map(|&v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|&v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(&p, &q)| p * q).collect();

    let (mu_x, oh, ow) = filter_valid(&x, h, w, &taps);
    let (mu_y, _, _) = filter_valid(&y, h, w, &taps);
    let (m_xx, _, _) = filter_valid(&xx, h, w, &taps);
    let (m_yy, _, _) = filter_valid(&yy, h, w, &taps);
    let (m_xy, _, _) = filter_valid(&xy, h, w, &taps);

    let mut acc = 0.0;
    for i in 0..oh * ow {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sxx = m_xx[i] - mx * mx;
        let syy = m_yy[i] - my * my;
        let sxy = m_xy[i] - mx * my;
        let num = (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2);
        let den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2);
        acc += num / den;
    }
    Ok(acc / (oh * ow) as f64)
}

/// Replicate-padded "same" separable Gaussian filtering.
fn gaussian_same(data: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let half = k / 2;
    let (ph, pw) = (h + 2 * half, w + 2 * half);
    let mut padded = vec![0.0; ph * pw];
    for r in 0..ph {
        let sr = r.saturating_sub(half).min(h - 1);
        for c in 0..pw {
            let sc = c.saturating_sub(half).min(w - 1);
            padded[r * pw + c] = data[sr * w + sc];
        }
    }
    let (out, oh, ow) = filter_valid(&padded, ph, pw, taps);
    debug_assert_eq!((oh, ow), (h, w));
    out
}

fn decimate2(data: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(oh * ow);
    for r in (0..h).step_by(2) {
        for c in (0..w).step_by(2) {
            out.push(data[r * w + c]);
        }
    }
    (out, oh, ow)
}

/// Pixel-domain multi-scale VIF of `fused` given `reference`, visual
/// noise variance 2 on the 255 scale.
///
/// Levels whose images drop below 4 pixels a side are skipped; `levels`
/// reports how many contributed.
pub fn vif(reference: &Image, fused: &Image) -> Result<VifValue> {
    check_same_dims(reference, fused, "vif")?;
    if reference.h() < VIF_MIN_SIDE || reference.w() < VIF_MIN_SIDE {
        return Err(Error::arg(format!(
            "vif needs at least {VIF_MIN_SIDE}x{VIF_MIN_SIDE} pixels, got {}x{}",
            reference.h(),
            reference.w()
        )));
    }
    let taps = gaussian_taps(VIF_WINDOW, VIF_SIGMA);
    let mut x: Vec<f64> = reference.data().iter().map(|&v| v * 255.0).collect();
    let mut y: Vec<f64> = fused.data().iter().map(|&v| v * 255.0).collect();
    let (mut h, mut w) = (reference.h(), reference.w());

    let (mut num, mut den) = (0.0, 0.0);
    let mut levels = 0;
    for level in 0..VIF_LEVELS {
        if level > 0 {
            let fx = gaussian_same(&x, h, w, &taps);
            let fy = gaussian_same(&y, h, w, &taps);
            let (dx, nh, nw) = decimate2(&fx, h, w);
            let (dy, _, _) = decimate2(&fy, h, w);
            x = dx;
            y = dy;
            h = nh;
            w = nw;
            if h < VIF_MIN_SIDE || w < VIF_MIN_SIDE {
                break;
            }
        }
        let mu_x = gaussian_same(&x, h, w, &taps);
        let mu_y = gaussian_same(&y, h, w, &taps);
        let xx: Vec<f64> = x.iter().map(|&v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|&v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(&p, &q)| p * q).collect();
        let m_xx = gaussian_same(&xx, h, w, &taps);
        let m_yy = gaussian_same(&yy, h, w, &taps);
        let m_xy = gaussian_same(&xy, h, w, &taps);

        for i in 0..h * w {
            let sigma_x = (m_xx[i] - mu_x[i] * mu_x[i]).max(0.0);
            let sigma_y = (m_yy[i] - mu_y[i] * mu_y[i]).max(0.0);
            let sigma_xy = m_xy[i] - mu_x[i] * mu_y[i];

            let mut g = sigma_xy / (sigma_x + 1e-10);
            let mut sv = sigma_y - g * sigma_xy;
            let mut sx = sigma_x;
            if sigma_x < 1e-10 {
                g = 0.0;
                sv = sigma_y;
                sx = 0.0;
            }
            if sigma_y < 1e-10 {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = sigma_y;
                g = 0.0;
            }
            if sv < 1e-10 {
                sv = 1e-10;
            }
            num += (1.0 + g * g * sx / (sv + VIF_SIGMA_NSQ)).log10();
            den += (1.0 + sx / VIF_SIGMA_NSQ).log10();
        }
        levels += 1;
    }
    let value = if den == 0.0 { 1.0 } else { num / den };
    Ok(VifValue { value, levels })
}

/// 10*log10(255^2 / MSE); near-zero MSE returns the 100 dB cap.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_dims(a, b, "psnr")?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y) * 255.0;
            d * d
        })
        .sum::<f64>()
        / (a.h() * a.w()) as f64;
    if mse < 1e-12 {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

fn check_same_dims(a: &Image, b: &Image, context: &str) -> Result<()> {
    if a.h() != b.h() {
        return Err(Error::shape("height", a.h(), b.h(), context));
    }
    if a.w() != b.w() {
        return Err(Error::shape("width", a.w(), b.w(), context));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Report aggregation
// ---------------------------------------------------------------------------

/// Scores a fused image against both sources: EN and AG on the fused image
/// alone, SSIM/VIF/PSNR averaged over the two sources.
pub fn evaluate_pair(x_v: &Image, x_i: &Image, fused: &Image) -> Result<MetricReport> {
    check_same_dims(x_v, fused, "evaluate_pair")?;
    check_same_dims(x_i, fused, "evaluate_pair")?;
    let en = entropy(fused);
    let ag = average_gradient(fused)?;
    let ssim_v = ssim(fused, x_v)?;
    let ssim_i = ssim(fused, x_i)?;
    let vif_v = vif(x_v, fused)?;
    let vif_i = vif(x_i, fused)?;
    let psnr_v = psnr(fused, x_v)?;
    let psnr_i = psnr(fused, x_i)?;
    let ssim = (ssim_v + ssim_i) / 2.0;
    let vif = (vif_v.value + vif_i.value) / 2.0;
    let psnr = (psnr_v + psnr_i) / 2.0;
    Ok(MetricReport {
        en,
        ag,
        ssim,
        vif,
        psnr,
        mean: (en + ag + ssim + vif + psnr) / 5.0,
        vif_truncated: vif_v.levels < VIF_LEVELS || vif_i.levels < VIF_LEVELS,
    })
}
