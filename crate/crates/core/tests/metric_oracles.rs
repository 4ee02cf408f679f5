//! Independent oracles for the evaluation metrics: a test-local windowed
//! SSIM, closed-form PSNR/entropy cases, and structural properties that a
//! correct implementation cannot avoid.

use ddrf_core::metrics::{average_gradient, entropy, evaluate_pair, psnr, ssim, vif};
use ddrf_core::raster::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, |_, _| rng.random_range(0.0..1.0))
}

fn textured_image(h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |r, c| {
        let a = ((r as f64) * 0.35).sin() * ((c as f64) * 0.2).cos();
        (0.5 + 0.35 * a + 0.1 * ((r + 2 * c) % 7) as f64 / 7.0).clamp(0.0, 1.0)
    })
}

// ---------------------------------------------------------------------------
// SSIM against a direct per-window implementation
// ---------------------------------------------------------------------------

/// Windowed SSIM written directly from the definition: an explicit 11x11
/// Gaussian window slid over every valid position, no separable filtering.
fn reference_ssim(a: &Image, b: &Image) -> f64 {
    const K: usize = 11;
    const SIGMA: f64 = 1.5;
    let c1 = (0.01 * 255.0) * (0.01 * 255.0);
    let c2 = (0.03 * 255.0) * (0.03 * 255.0);
    let mut window = [0.0; K * K];
    let half = (K / 2) as f64;
    let mut total = 0.0;
    for r in 0..K {
        for c in 0..K {
            let (dy, dx) = (r as f64 - half, c as f64 - half);
            let v = (-(dx * dx + dy * dy) / (2.0 * SIGMA * SIGMA)).exp();
            window[r * K + c] = v;
            total += v;
        }
    }
    for v in &mut window {
        *v /= total;
    }

    let (h, w) = (a.h(), a.w());
    let mut acc = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - K {
        for c0 in 0..=w - K {
            let (mut mx, mut my) = (0.0, 0.0);
            for r in 0..K {
                for c in 0..K {
                    let wgt = window[r * K + c];
                    mx += wgt * a.get(r0 + r, c0 + c) * 255.0;
                    my += wgt * b.get(r0 + r, c0 + c) * 255.0;
                }
            }
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            for r in 0..K {
                for c in 0..K {
                    let wgt = window[r * K + c];
                    let dx = a.get(r0 + r, c0 + c) * 255.0;
                    let dy = b.get(r0 + r, c0 + c) * 255.0;
                    sxx += wgt * dx * dx;
                    syy += wgt * dy * dy;
                    sxy += wgt * dx * dy;
                }
            }
            sxx -= mx * mx;
            syy -= my * my;
            sxy -= mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * sxy + c2);
            let den = (mx * mx + my * my + c1) * (sxx + syy + c2);
            acc += num / den;
            count += 1;
        }
    }
    acc / count as f64
}

#[test]
fn ssim_matches_direct_window_implementation() {
    for seed in 0..6 {
        let a = random_image(13, 15, seed);
        let b = random_image(13, 15, seed + 100);
        let got = ssim(&a, &b).unwrap();
        let want = reference_ssim(&a, &b);
        assert!(
            (got - want).abs() <= 1e-9,
            "seed {seed}: ssim {got:.12} vs reference {want:.12}"
        );
    }
}

#[test]
fn ssim_is_symmetric_and_bounded() {
    let a = random_image(16, 16, 1);
    let b = random_image(16, 16, 2);
    let ab = ssim(&a, &b).unwrap();
    let ba = ssim(&b, &a).unwrap();
    assert!((ab - ba).abs() <= 1e-12);
    assert!(ab <= 1.0 + 1e-12);
    assert!(ssim(&a, &a).unwrap() > 1.0 - 1e-9);
}

// ---------------------------------------------------------------------------
// Average gradient
// ---------------------------------------------------------------------------

/// Direct recomputation over the pixel grid, matching the definition:
/// forward differences, zero beyond the last row or column, RMS of the two,
/// averaged over all pixels.
fn reference_ag(img: &Image) -> f64 {
    let (h, w) = (img.h(), img.w());
    let mut acc = 0.0;
    for r in 0..h {
        for c in 0..w {
            let v = img.get(r, c);
            let dx = if c + 1 < w { img.get(r, c + 1) - v } else { 0.0 } * 255.0;
            let dy = if r + 1 < h { img.get(r + 1, c) - v } else { 0.0 } * 255.0;
            acc += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    acc / (h * w) as f64
}

#[test]
fn ag_matches_direct_recomputation() {
    for seed in 0..8 {
        let img = random_image(9, 11, seed);
        let got = average_gradient(&img).unwrap();
        assert!((got - reference_ag(&img)).abs() <= 1e-12);
    }
}

#[test]
fn ag_is_transpose_invariant() {
    let img = random_image(10, 14, 3);
    let t = Image::from_fn(14, 10, |r, c| img.get(c, r));
    let a = average_gradient(&img).unwrap();
    let b = average_gradient(&t).unwrap();
    assert!((a - b).abs() <= 1e-12);
}

#[test]
fn ag_scales_linearly_and_ignores_offsets() {
    let img = random_image(12, 12, 4).map(|v| 0.3 + 0.4 * v);
    let base = average_gradient(&img).unwrap();
    let half = average_gradient(&img.map(|v| 0.5 * v)).unwrap();
    assert!((half - 0.5 * base).abs() <= 1e-12);
    let shifted = average_gradient(&img.map(|v| v + 0.1)).unwrap();
    assert!((shifted - base).abs() <= 1e-10);
}

// ---------------------------------------------------------------------------
// PSNR closed forms
// ---------------------------------------------------------------------------

#[test]
fn psnr_of_uniform_offset_has_closed_form() {
    // A constant diff of 0.1 on the unit scale is 25.5 on the 255 scale,
    // giving exactly 20 log10(1/0.1) = 20 dB.
    let a = random_image(16, 16, 9).map(|v| 0.8 * v);
    let b = a.map(|v| v + 0.1);
    let got = psnr(&a, &b).unwrap();
    assert!((got - 20.0).abs() <= 1e-9, "psnr {got}");
}

#[test]
fn psnr_is_symmetric_and_monotone_in_error() {
    let a = random_image(16, 16, 10).map(|v| 0.6 * v + 0.2);
    assert!((psnr(&a, &a.map(|v| v + 0.05)).unwrap()
        - psnr(&a.map(|v| v + 0.05), &a).unwrap())
    .abs()
        <= 1e-12);
    let small = psnr(&a, &a.map(|v| v + 0.02)).unwrap();
    let large = psnr(&a, &a.map(|v| v + 0.08)).unwrap();
    assert!(small > large);
}

// ---------------------------------------------------------------------------
// Entropy closed forms
// ---------------------------------------------------------------------------

#[test]
fn entropy_closed_forms() {
    let two_level = Image::from_fn(16, 16, |r, _| if r < 8 { 0.0 } else { 1.0 });
    assert!((entropy(&two_level) - 1.0).abs() <= 1e-12);

    let four_level = Image::from_fn(16, 16, |r, _| [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0][r % 4]);
    assert!((entropy(&four_level) - 2.0).abs() <= 1e-12);

    let constant = Image::filled(16, 16, 0.42);
    assert!(entropy(&constant).abs() <= 1e-12);
}

#[test]
fn entropy_ignores_tiling() {
    let img = random_image(12, 12, 5);
    let tiled = Image::from_fn(12, 24, |r, c| img.get(r, c % 12));
    assert!((entropy(&img) - entropy(&tiled)).abs() <= 1e-12);
}

// ---------------------------------------------------------------------------
// VIF structure
// ---------------------------------------------------------------------------

#[test]
fn vif_identity_and_degradation_ordering() {
    let img = textured_image(40, 40);
    let same = vif(&img, &img).unwrap();
    assert!((same.value - 1.0).abs() <= 1e-6, "vif(x,x) = {}", same.value);
    assert_eq!(same.levels, 4);

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let noisy = Image::from_fn(img.h(), img.w(), |r, c| {
        (img.get(r, c) + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0)
    });
    let degraded = vif(&img, &noisy).unwrap();
    assert!(degraded.value < same.value);
    assert!(degraded.value >= 0.0);
}

#[test]
fn vif_counts_feasible_levels() {
    // 33 -> 17 -> 9 -> 5 keeps all four levels; 20 -> 10 -> 5 -> 3 stops
    // after three.
    let full = vif(&textured_image(33, 33), &textured_image(33, 33)).unwrap();
    assert_eq!(full.levels, 4);
    let img = textured_image(20, 20);
    let short = vif(&img, &img).unwrap();
    assert_eq!(short.levels, 3);
}

// ---------------------------------------------------------------------------
// Pair evaluation protocol
// ---------------------------------------------------------------------------

#[test]
fn evaluate_pair_matches_individual_metrics() {
    let x_v = textured_image(34, 34);
    let x_i = random_image(34, 34, 21).map(|v| 0.25 + 0.5 * v);
    let fused = Image::from_fn(34, 34, |r, c| 0.5 * (x_v.get(r, c) + x_i.get(r, c)));

    let report = evaluate_pair(&x_v, &x_i, &fused).unwrap();
    assert!((report.en - entropy(&fused)).abs() <= 1e-12);
    assert!((report.ag - average_gradient(&fused).unwrap()).abs() <= 1e-12);

    let want_ssim = 0.5 * (ssim(&fused, &x_v).unwrap() + ssim(&fused, &x_i).unwrap());
    assert!((report.ssim - want_ssim).abs() <= 1e-12);

    let vv = vif(&x_v, &fused).unwrap();
    let vi = vif(&x_i, &fused).unwrap();
    assert!((report.vif - 0.5 * (vv.value + vi.value)).abs() <= 1e-12);

    let want_psnr = 0.5 * (psnr(&fused, &x_v).unwrap() + psnr(&fused, &x_i).unwrap());
    assert!((report.psnr - want_psnr).abs() <= 1e-12);

    let mean = (report.en + report.ag + report.ssim + report.vif + report.psnr) / 5.0;
    assert!((report.mean - mean).abs() <= 1e-12);
    assert!(!report.vif_truncated);
}

#[test]
fn evaluate_pair_flags_vif_truncation_on_small_images() {
    let x_v = textured_image(24, 24);
    let x_i = random_image(24, 24, 30);
    let fused = Image::from_fn(24, 24, |r, c| 0.5 * (x_v.get(r, c) + x_i.get(r, c)));
    let report = evaluate_pair(&x_v, &x_i, &fused).unwrap();
    assert!(report.vif_truncated);
}
