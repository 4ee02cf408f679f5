//! Degradation kernel bank, dynamic kernel synthesis, and the forward
//! degradation operator: blur, subsample, add noise, clamp.
//!
//! The bank holds twelve 15x15 basis kernels, four per family: motion
//! blur, isotropic Gaussian, and anisotropic Gaussian. A dynamic kernel is
//! a convex combination of one basis from each family, so it inherits unit
//! mass and nonnegativity from the bases.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::raster::{conv_replicate_same, Image};
use crate::{Error, Result};

/// Side length of every degradation kernel.
pub const KERNEL_SIZE: usize = 15;
/// Number of basis kernels in the bank.
pub const BANK_SIZE: usize = 12;
/// Variants per kernel family.
pub const FAMILY_VARIANTS: usize = 4;
/// Largest degradation noise standard deviation, on the [0,1] scale.
pub const MAX_NOISE_SIGMA: f64 = 10.0 / 255.0;

/// Tolerance for a convex-combination weight sum.
const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelFamily {
    Motion,
    Isotropic,
    Anisotropic,
}

impl KernelFamily {
    fn offset(self) -> usize {
        match self {
            KernelFamily::Motion => 0,
            KernelFamily::Isotropic => FAMILY_VARIANTS,
            KernelFamily::Anisotropic => 2 * FAMILY_VARIANTS,
        }
    }
}

// ---------------------------------------------------------------------------
// Basis kernel construction
// ---------------------------------------------------------------------------

/// Motion blur parameters: (length, angle in degrees).
const MOTION_PARAMS: [(usize, f64); FAMILY_VARIANTS] = [(5, 0.0), (5, 45.0), (9, 90.0), (9, 135.0)];
/// Isotropic Gaussian standard deviations.
const ISO_SIGMAS: [f64; FAMILY_VARIANTS] = [0.8, 1.6, 2.4, 3.2];
/// Anisotropic Gaussian eigen-sigmas and rotation in degrees.
const ANISO_PARAMS: [(f64, f64, f64); FAMILY_VARIANTS] = [
    (0.8, 2.4, 0.0),
    (1.2, 3.2, 30.0),
    (0.6, 1.8, 60.0),
    (1.0, 4.0, 120.0),
];

fn center() -> usize {
    (KERNEL_SIZE - 1) / 2
}

/// Centered line kernel: `length` cells of mass 1/length stepped along one
/// of the four supported directions.
fn motion_kernel(length: usize, angle_deg: f64) -> Vec<f64> {
    // (row, col) unit steps; rows grow downward.
    let step: (isize, isize) = match angle_deg as i64 {
        0 => (0, 1),
        45 => (-1, 1),
        90 => (-1, 0),
        135 => (-1, -1),
        other => unreachable!("unsupported motion angle {other}"),
    };
    let c = center() as isize;
    let half = (length as isize - 1) / 2;
    let mut k = vec![0.0; KERNEL_SIZE * KERNEL_SIZE];
    for t in -half..=half {
        let r = (c + t * step.0) as usize;
        let col = (c + t * step.1) as usize;
        k[r * KERNEL_SIZE + col] = 1.0 / length as f64;
    }
    k
}

fn isotropic_kernel(sigma: f64) -> Vec<f64> {
    let c = center() as f64;
    let mut k: Vec<f64> = (0..KERNEL_SIZE * KERNEL_SIZE)
        .map(|i| {
            let (r, col) = ((i / KERNEL_SIZE) as f64, (i % KERNEL_SIZE) as f64);
            let d2 = (r - c).powi(2) + (col - c).powi(2);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    normalize(&mut k);
    k
}

fn anisotropic_kernel(sigma_major: f64, sigma_minor: f64, angle_deg: f64) -> Vec<f64> {
    let theta = angle_deg.to_radians();
    let (cos, sin) = (theta.cos(), theta.sin());
    // Inverse covariance of R * diag(s1^2, s2^2) * R^T.
    let (inv1, inv2) = (1.0 / (sigma_major * sigma_major), 1.0 / (sigma_minor * sigma_minor));
    let a = cos * cos * inv1 + sin * sin * inv2;
    let b = sin * cos * (inv1 - inv2);
    let d = sin * sin * inv1 + cos * cos * inv2;
    let c = center() as f64;
    let mut k: Vec<f64> = (0..KERNEL_SIZE * KERNEL_SIZE)
        .map(|i| {
            let y = (i / KERNEL_SIZE) as f64 - c;
            let x = (i % KERNEL_SIZE) as f64 - c;
            (-0.5 * (a * x * x + 2.0 * b * x * y + d * y * y)).exp()
        })
        .collect();
    normalize(&mut k);
    k
}

fn normalize(k: &mut [f64]) {
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
}

// ---------------------------------------------------------------------------
// Kernel bank
// ---------------------------------------------------------------------------

/// The twelve basis kernels, family-major: motion 0..4, isotropic 4..8,
/// anisotropic 8..12.
#[derive(Clone, Debug)]
pub struct KernelBank {
    kernels: Vec<Vec<f64>>,
    seed: u64,
}

impl KernelBank {
    /// Builds the standard bank. Construction is fully deterministic; the
    /// seed is carried along so downstream artifacts can record it.
    pub fn build(seed: u64) -> Self {
        let mut kernels = Vec::with_capacity(BANK_SIZE);
        for (len, angle) in MOTION_PARAMS {
            kernels.push(motion_kernel(len, angle));
        }
        for sigma in ISO_SIGMAS {
            kernels.push(isotropic_kernel(sigma));
        }
        for (s1, s2, angle) in ANISO_PARAMS {
            kernels.push(anisotropic_kernel(s1, s2, angle));
        }
        KernelBank { kernels, seed }
    }

    /// Builds a bank from caller-supplied kernels, validating count, size,
    /// nonnegativity, and unit mass.
    pub fn from_kernels(kernels: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        if kernels.len() != BANK_SIZE {
            return Err(Error::arg(format!(
                "kernel bank needs {BANK_SIZE} kernels, got {}",
                kernels.len()
            )));
        }
        for (i, k) in kernels.iter().enumerate() {
            if k.len() != KERNEL_SIZE * KERNEL_SIZE {
                return Err(Error::shape(
                    "kernel elements",
                    KERNEL_SIZE * KERNEL_SIZE,
                    k.len(),
                    &format!("bank kernel {i}"),
                ));
            }
            let sum: f64 = k.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(Error::arg(format!("bank kernel {i} has mass {sum}, expected 1")));
            }
            if k.iter().any(|&v| v < 0.0) {
                return Err(Error::arg(format!("bank kernel {i} has negative entries")));
            }
        }
        Ok(KernelBank { kernels, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Basis kernel by family and 1-based variant index.
    pub fn basis(&self, family: KernelFamily, j: usize) -> Result<&[f64]> {
        if j == 0 || j > FAMILY_VARIANTS {
            return Err(Error::arg(format!(
                "kernel variant index must be in 1..={FAMILY_VARIANTS}, got {j}"
            )));
        }
        Ok(&self.kernels[family.offset() + j - 1])
    }

    /// All twelve kernels in bank order.
    pub fn all(&self) -> impl Iterator<Item = &[f64]> {
        self.kernels.iter().map(|k| k.as_slice())
    }

    /// Uniform average of all twelve bases with equal family weights; the
    /// neutral kernel used when no degradation spec is supplied.
    pub fn mean_kernel(&self) -> DynamicKernel {
        let n = KERNEL_SIZE * KERNEL_SIZE;
        let mut kernel = vec![0.0; n];
        for k in &self.kernels {
            for (dst, &v) in kernel.iter_mut().zip(k) {
                *dst += v / BANK_SIZE as f64;
            }
        }
        DynamicKernel {
            weights: [1.0 / 3.0; 3],
            indices: [1, 1, 1],
            kernel,
        }
    }
}

// ---------------------------------------------------------------------------
// Dynamic kernels
// ---------------------------------------------------------------------------

/// Convex combination of one motion, one isotropic, and one anisotropic
/// basis kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicKernel {
    /// Family weights (a, b, c); nonnegative, summing to 1.
    pub weights: [f64; 3],
    /// 1-based variant indices (j_m, j_i, j_a).
    pub indices: [usize; 3],
    kernel: Vec<f64>,
}

impl DynamicKernel {
    /// The realized 15x15 kernel.
    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }
}

/// Realizes a dynamic kernel from family weights and variant indices.
pub fn synthesize_dynamic_kernel(
    bank: &KernelBank,
    weights: [f64; 3],
    indices: [usize; 3],
) -> Result<DynamicKernel> {
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::arg(format!(
            "dynamic kernel weights must sum to 1, got {sum}"
        )));
    }
    if weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
        return Err(Error::arg(format!(
            "dynamic kernel weights must lie in [0,1], got {weights:?}"
        )));
    }
    let bases = [
        bank.basis(KernelFamily::Motion, indices[0])?,
        bank.basis(KernelFamily::Isotropic, indices[1])?,
        bank.basis(KernelFamily::Anisotropic, indices[2])?,
    ];
    let n = KERNEL_SIZE * KERNEL_SIZE;
    let mut kernel = vec![0.0; n];
    for (w, base) in weights.iter().zip(bases) {
        for (dst, &v) in kernel.iter_mut().zip(base) {
            *dst += w * v;
        }
    }
    Ok(DynamicKernel {
        weights,
        indices,
        kernel,
    })
}

/// Uniform sample from the 2-simplex via sorted-uniform spacings.
fn sample_simplex(rng: &mut impl Rng) -> [f64; 3] {
    let (u1, u2): (f64, f64) = (rng.random(), rng.random());
    let (lo, hi) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
    [lo, hi - lo, 1.0 - hi]
}

/// Draws a random dynamic kernel: simplex weights plus uniform variant
/// indices per family.
pub fn sample_dynamic_kernel(bank: &KernelBank, rng: &mut impl Rng) -> DynamicKernel {
    let weights = sample_simplex(rng);
    let indices = [
        rng.random_range(1..=FAMILY_VARIANTS),
        rng.random_range(1..=FAMILY_VARIANTS),
        rng.random_range(1..=FAMILY_VARIANTS),
    ];
    synthesize_dynamic_kernel(bank, weights, indices)
        .expect("sampled weights lie on the simplex by construction")
}

// ---------------------------------------------------------------------------
// Degradation
// ---------------------------------------------------------------------------

/// Full description of one degradation: kernel, subsampling factor, noise
/// level, and which modality the degraded output stands in for
/// (1 = visible, 2 = infrared, 3 = fused).
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kernel: DynamicKernel,
    pub scale: u32,
    pub noise_sigma: f64,
    pub model_index: u8,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scale != 1 && self.scale != 2 {
            return Err(Error::arg(format!(
                "degradation scale must be 1 or 2, got {}",
                self.scale
            )));
        }
        if !(0.0..=MAX_NOISE_SIGMA + WEIGHT_SUM_TOL).contains(&self.noise_sigma) {
            return Err(Error::arg(format!(
                "noise sigma must lie in [0, {MAX_NOISE_SIGMA}], got {}",
                self.noise_sigma
            )));
        }
        if !(1..=3).contains(&self.model_index) {
            return Err(Error::arg(format!(
                "model index must be 1, 2, or 3, got {}",
                self.model_index
            )));
        }
        Ok(())
    }

    /// Compact text form `a,b,c,jm,ji,ja,s,sigma,m`; floats use the
    /// shortest representation that parses back to the same value.
    pub fn serialize(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.kernel.weights[0],
            self.kernel.weights[1],
            self.kernel.weights[2],
            self.kernel.indices[0],
            self.kernel.indices[1],
            self.kernel.indices[2],
            self.scale,
            self.noise_sigma,
            self.model_index
        )
    }

    /// Parses the `serialize` format, re-realizing the kernel from `bank`.
    pub fn parse(s: &str, bank: &KernelBank) -> Result<Self> {
        let fields: Vec<&str> = s.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::data(format!(
                "degradation spec needs 9 comma-separated fields, got {} in {s:?}"
            , fields.len())));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::data(format!("bad float {:?} in degradation spec", fields[i])))
        };
        let u = |i: usize| -> Result<usize> {
            fields[i]
                .parse()
                .map_err(|_| Error::data(format!("bad integer {:?} in degradation spec", fields[i])))
        };
        let weights = [f(0)?, f(1)?, f(2)?];
        let indices = [u(3)?, u(4)?, u(5)?];
        let spec = DegradationSpec {
            kernel: synthesize_dynamic_kernel(bank, weights, indices)?,
            scale: u(6)? as u32,
            noise_sigma: f(7)?,
            model_index: u(8)? as u8,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Applies the degradation model: replicate-edge blur with the dynamic
/// kernel, keep every s-th pixel starting at offset 0, add Gaussian noise,
/// clamp to [0,1].
///
/// Sigma 0 draws nothing from `rng`, so noise-free degradation is
/// independent of generator state.
pub fn degrade(image: &Image, spec: &DegradationSpec, rng: &mut impl Rng) -> Result<Image> {
    spec.validate()?;
    if image.h() < KERNEL_SIZE || image.w() < KERNEL_SIZE {
        return Err(Error::arg(format!(
            "image {}x{} is smaller than the {KERNEL_SIZE}x{KERNEL_SIZE} degradation kernel",
            image.h(),
            image.w()
        )));
    }
    let blurred = conv_replicate_same(image, spec.kernel.kernel(), KERNEL_SIZE);
    let s = spec.scale as usize;
    let (sh, sw) = (blurred.h().div_ceil(s), blurred.w().div_ceil(s));
    let mut out = Image::from_fn(sh, sw, |r, c| blurred.get(r * s, c * s));
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::arg(format!("bad noise sigma: {e}")))?;
        for v in out.data_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(out.clamp01())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_bank_kernels_have_unit_mass() {
        let bank = KernelBank::build(0);
        for (i, k) in bank.all().enumerate() {
            let sum: f64 = k.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "kernel {i} mass = {sum}, expected ~1");
            assert!(k.iter().all(|&v| v >= 0.0), "kernel {i} has negative entries");
        }
    }

    #[test]
    fn horizontal_motion_kernel_matches_direct_construction() {
        let bank = KernelBank::build(0);
        let k = bank.basis(KernelFamily::Motion, 1).expect("basis");
        let c = (KERNEL_SIZE - 1) / 2;
        let mut expect = vec![0.0; KERNEL_SIZE * KERNEL_SIZE];
        for dc in -2i32..=2 {
            expect[c * KERNEL_SIZE + (c as i32 + dc) as usize] = 0.2;
        }
        assert_eq!(k, &expect[..]);
    }

    #[test]
    fn vertical_motion_kernel_occupies_center_column() {
        let bank = KernelBank::build(0);
        let k = bank.basis(KernelFamily::Motion, 3).expect("basis");
        let c = (KERNEL_SIZE - 1) / 2;
        let nonzero: Vec<usize> = k
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(nonzero.len(), 9);
        for idx in nonzero {
            assert_eq!(idx % KERNEL_SIZE, c, "entry off the center column");
            assert!((k[idx] - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn isotropic_kernel_peaks_at_center_and_is_symmetric() {
        let bank = KernelBank::build(0);
        let k = bank.basis(KernelFamily::Isotropic, 1).expect("basis");
        let c = (KERNEL_SIZE - 1) / 2;
        let center_val = k[c * KERNEL_SIZE + c];
        assert!(k.iter().all(|&v| v <= center_val));
        // 90-degree rotation symmetry.
        for r in 0..KERNEL_SIZE {
            for col in 0..KERNEL_SIZE {
                let rotated = k[(KERNEL_SIZE - 1 - col) * KERNEL_SIZE + r];
                assert!((k[r * KERNEL_SIZE + col] - rotated).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn anisotropic_kernel_is_elongated_along_its_major_axis() {
        let bank = KernelBank::build(0);
        // Variant 1: sigmas (0.8, 2.4) at 0 degrees; x-axis uses sigma 0.8.
        let k = bank.basis(KernelFamily::Anisotropic, 1).expect("basis");
        let c = (KERNEL_SIZE - 1) / 2;
        let along_y = k[(c + 2) * KERNEL_SIZE + c];
        let along_x = k[c * KERNEL_SIZE + c + 2];
        assert!(
            along_y > along_x * 2.0,
            "expected elongation along y: {along_y} vs {along_x}"
        );
    }

    #[test]
    fn vertex_weight_reproduces_single_family_basis() {
        let bank = KernelBank::build(0);
        let dk = synthesize_dynamic_kernel(&bank, [1.0, 0.0, 0.0], [2, 1, 1]).expect("synthesize");
        assert_eq!(dk.kernel(), bank.basis(KernelFamily::Motion, 2).expect("basis"));
    }

    #[test]
    fn equal_weights_give_mean_of_three_bases() {
        let bank = KernelBank::build(0);
        let third = 1.0 / 3.0;
        let dk = synthesize_dynamic_kernel(&bank, [third; 3], [1, 2, 3]).expect("synthesize");
        let bases = [
            bank.basis(KernelFamily::Motion, 1).expect("m"),
            bank.basis(KernelFamily::Isotropic, 2).expect("i"),
            bank.basis(KernelFamily::Anisotropic, 3).expect("a"),
        ];
        for (i, &v) in dk.kernel().iter().enumerate() {
            let want = (bases[0][i] + bases[1][i] + bases[2][i]) / 3.0;
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_sum_violation_reports_measured_sum() {
        let bank = KernelBank::build(0);
        let err = synthesize_dynamic_kernel(&bank, [0.5, 0.5, 0.5], [1, 1, 1]).unwrap_err();
        assert!(err.to_string().contains("1.5"), "message should show the sum: {err}");
    }

    #[test]
    fn out_of_range_variant_index_is_rejected() {
        let bank = KernelBank::build(0);
        assert!(synthesize_dynamic_kernel(&bank, [1.0, 0.0, 0.0], [5, 1, 1]).is_err());
        assert!(synthesize_dynamic_kernel(&bank, [1.0, 0.0, 0.0], [0, 1, 1]).is_err());
    }

    #[test]
    fn sampled_kernels_are_reproducible_and_valid() {
        let bank = KernelBank::build(7);
        let mut r1 = ChaCha8Rng::seed_from_u64(99);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let a = sample_dynamic_kernel(&bank, &mut r1);
            let b = sample_dynamic_kernel(&bank, &mut r2);
            assert_eq!(a, b);
            let mass: f64 = a.kernel().iter().sum();
            assert!((mass - 1.0).abs() < 1e-9);
            let wsum: f64 = a.weights.iter().sum();
            assert!((wsum - 1.0).abs() < 1e-12);
            assert!(a.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn mean_kernel_averages_the_whole_bank() {
        let bank = KernelBank::build(0);
        let mk = bank.mean_kernel();
        let mass: f64 = mk.kernel().iter().sum();
        assert!((mass - 1.0).abs() < 1e-12);
        let first_sum: f64 = bank.all().map(|k| k[0]).sum();
        assert!((mk.kernel()[0] - first_sum / 12.0).abs() < 1e-15);
    }

    #[test]
    fn constant_image_survives_degradation_unchanged() {
        let bank = KernelBank::build(0);
        let img = Image::filled(20, 20, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = DegradationSpec {
            kernel: sample_dynamic_kernel(&bank, &mut rng),
            scale: 1,
            noise_sigma: 0.0,
            model_index: 1,
        };
        let out = degrade(&img, &spec, &mut rng).expect("degrade");
        for &v in out.data() {
            assert!((v - 0.5).abs() < 1e-12, "constant not preserved: {v}");
        }
    }

    #[test]
    fn degrade_rejects_images_smaller_than_kernel() {
        let bank = KernelBank::build(0);
        let img = Image::filled(10, 20, 0.5);
        let spec = DegradationSpec {
            kernel: bank.mean_kernel(),
            scale: 1,
            noise_sigma: 0.0,
            model_index: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(degrade(&img, &spec, &mut rng).is_err());
    }

    #[test]
    fn scale_two_halves_dimensions_rounding_up() {
        let bank = KernelBank::build(0);
        let img = Image::filled(17, 20, 0.5);
        let spec = DegradationSpec {
            kernel: bank.mean_kernel(),
            scale: 2,
            noise_sigma: 0.0,
            model_index: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = degrade(&img, &spec, &mut rng).expect("degrade");
        assert_eq!((out.h(), out.w()), (9, 10));
    }

    #[test]
    fn spec_serialization_round_trips_exactly() {
        let bank = KernelBank::build(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for m in 1..=3u8 {
            let spec = DegradationSpec {
                kernel: sample_dynamic_kernel(&bank, &mut rng),
                scale: 2,
                noise_sigma: rng.random_range(0.0..MAX_NOISE_SIGMA),
                model_index: m,
            };
            let text = spec.serialize();
            let back = DegradationSpec::parse(&text, &bank).expect("parse");
            assert_eq!(spec, back);
        }
    }

    #[test]
    fn spec_parse_rejects_malformed_input() {
        let bank = KernelBank::build(0);
        assert!(DegradationSpec::parse("1,0,0,1,1,1,1,0", &bank).is_err());
        assert!(DegradationSpec::parse("x,0,0,1,1,1,1,0,1", &bank).is_err());
        assert!(DegradationSpec::parse("0.5,0.5,0.5,1,1,1,1,0,1", &bank).is_err());
        assert!(DegradationSpec::parse("1,0,0,1,1,1,3,0,1", &bank).is_err());
    }
}
