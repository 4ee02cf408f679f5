//! Differentiable training objective: similarity to the clean sources,
//! repulsion from degraded negatives, and agreement with a rule-based
//! fusion reference, combined into one scalar.
//!
//! Every term is assembled from tape operations so gradients flow back to
//! the network parameters. SSIM here runs on the [0,1] scale with its own
//! constants; the evaluation-side SSIM in `metrics` is an independent
//! implementation on the 255 scale and the two agree only algebraically.

use crate::autodiff::{DiffArray, Tape, Tensor};
use crate::raster::{gaussian_taps, Image};
use crate::{Error, Result};

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Weights applied to the similarity and positive terms; the negative
/// block always enters as the mean of its terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub similarity: f64,
    pub positive: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { similarity: 1.0, positive: 1.0 }
    }
}

/// Scalar values of the three terms and their weighted combination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub similarity: f64,
    pub negative: f64,
    pub positive: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Places an image on the tape as a constant [1,H,W] array.
pub fn lift_image(tape: &Tape, image: &Image) -> DiffArray {
    let t = Tensor::new(vec![1, image.h(), image.w()], image.data().to_vec())
        .expect("image dimensions are consistent by construction");
    tape.leaf(&t)
}

fn require_plane(a: &DiffArray, context: &str) -> Result<(usize, usize)> {
    let s = a.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::arg(format!(
            "{context} expects a single-channel [1,H,W] array, got {s:?}"
        )));
    }
    Ok((s[1], s[2]))
}

// ---------------------------------------------------------------------------
// Differentiable SSIM
// ---------------------------------------------------------------------------

/// Mean SSIM over all complete 11x11 Gaussian windows as a differentiable
/// scalar; inputs are [1,H,W] on the [0,1] scale.
pub fn ssim_diff(tape: &Tape, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
    let (h, w) = require_plane(a, "ssim")?;
    let (bh, bw) = require_plane(b, "ssim")?;
    if h != bh {
        return Err(Error::shape("height", h, bh, "ssim"));
    }
    if w != bw {
        return Err(Error::shape("width", w, bw, "ssim"));
    }
    if h < WINDOW || w < WINDOW {
        return Err(Error::arg(format!(
            "ssim needs at least {WINDOW}x{WINDOW} pixels, got {h}x{w}"
        )));
    }

    let taps = gaussian_taps(WINDOW, WINDOW_SIGMA);
    let mut win = Vec::with_capacity(WINDOW * WINDOW);
    for &tr in &taps {
        for &tc in &taps {
            win.push(tr * tc);
        }
    }
    let window = tape.leaf(&Tensor::new(vec![1, 1, WINDOW, WINDOW], win)?);
    let no_bias = tape.leaf(&Tensor::zeros(vec![1]));
    let blur = |x: &DiffArray| tape.conv2d(x, &window, &no_bias, 1, 0);

    let mu_a = blur(a)?;
    let mu_b = blur(b)?;
    let m_aa = blur(&tape.mul(a, a)?)?;
    let m_bb = blur(&tape.mul(b, b)?)?;
    let m_ab = blur(&tape.mul(a, b)?)?;

    let mu_ab = tape.mul(&mu_a, &mu_b)?;
    let mu_a2 = tape.mul(&mu_a, &mu_a)?;
    let mu_b2 = tape.mul(&mu_b, &mu_b)?;
    let var_a = tape.sub(&m_aa, &mu_a2)?;
    let var_b = tape.sub(&m_bb, &mu_b2)?;
    let cov = tape.sub(&m_ab, &mu_ab)?;

    let num = tape.mul(
        &tape.scalar_add(&tape.scalar_mul(&mu_ab, 2.0), C1),
        &tape.scalar_add(&tape.scalar_mul(&cov, 2.0), C2),
    )?;
    let den = tape.mul(
        &tape.scalar_add(&tape.add(&mu_a2, &mu_b2)?, C1),
        &tape.scalar_add(&tape.add(&var_a, &var_b)?, C2),
    )?;
    Ok(tape.mean(&tape.div(&num, &den)?))
}

fn one_minus(tape: &Tape, x: &DiffArray) -> DiffArray {
    tape.scalar_add(&tape.scalar_mul(x, -1.0), 1.0)
}

fn mean_of(tape: &Tape, terms: &[DiffArray]) -> DiffArray {
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = tape.add(&acc, t).expect("scalar terms share shape");
    }
    tape.scalar_mul(&acc, 1.0 / terms.len() as f64)
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

/// One minus the mean SSIM over (prediction, target) pairs.
pub fn loss_similarity(tape: &Tape, pairs: &[(DiffArray, DiffArray)]) -> Result<DiffArray> {
    if pairs.is_empty() {
        return Err(Error::arg("similarity loss needs at least one pair".to_string()));
    }
    let terms: Vec<DiffArray> = pairs
        .iter()
        .map(|(pred, target)| ssim_diff(tape, pred, target))
        .collect::<Result<_>>()?;
    Ok(one_minus(tape, &mean_of(tape, &terms)))
}

/// Mean SSIM between the fused image and each degraded negative; minimizing
/// it pushes the fusion away from degraded renditions. With `eq8_literal`
/// the complement (one minus the mean) is returned instead.
pub fn loss_negative(
    tape: &Tape,
    fused: &DiffArray,
    negatives: &[DiffArray],
    eq8_literal: bool,
) -> Result<DiffArray> {
    if negatives.is_empty() {
        return Err(Error::arg("negative loss needs at least one negative".to_string()));
    }
    let terms: Vec<DiffArray> = negatives
        .iter()
        .map(|n| ssim_diff(tape, n, fused))
        .collect::<Result<_>>()?;
    let mean = mean_of(tape, &terms);
    Ok(if eq8_literal { one_minus(tape, &mean) } else { mean })
}

/// One minus SSIM against the rule-based fusion reference.
pub fn loss_positive(tape: &Tape, fused: &DiffArray, reference: &DiffArray) -> Result<DiffArray> {
    Ok(one_minus(tape, &ssim_diff(tape, fused, reference)?))
}

/// Combines per-negative terms with the weighted similarity and positive
/// terms: mean(negatives) + w_sim * similarity + w_pos * positive. An empty
/// negative slice contributes zero.
pub fn loss_total(
    tape: &Tape,
    negatives: &[DiffArray],
    similarity: &DiffArray,
    positive: &DiffArray,
    weights: LossWeights,
) -> (DiffArray, LossReport) {
    let negative = if negatives.is_empty() {
        tape.leaf(&Tensor::scalar(0.0))
    } else {
        mean_of(tape, negatives)
    };
    let total = tape
        .add(
            &negative,
            &tape
                .add(
                    &tape.scalar_mul(similarity, weights.similarity),
                    &tape.scalar_mul(positive, weights.positive),
                )
                .expect("scalar terms share shape"),
        )
        .expect("scalar terms share shape");
    let report = LossReport {
        similarity: similarity.item(),
        negative: negative.item(),
        positive: positive.item(),
        total: total.item(),
        weights,
    };
    (total, report)
}
