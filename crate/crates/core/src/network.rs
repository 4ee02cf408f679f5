//! The restore-and-fuse network: two non-shared restoration branches, a
//! four-layer dynamic fusion module, and a PCA projector that conditions
//! both on the degradation kernels.

use std::fmt;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    concat_values, relu_forward, sigmoid_forward, DiffArray, Tape, Tensor,
};
use crate::dynconv::{
    dynamic_forward, dynamic_forward_infer, static_forward, static_forward_infer, DynamicConvLayer,
    StagedDynamicConv, StaticConv,
};
use crate::kernels::{sample_dynamic_kernel, DynamicKernel, KernelBank, KERNEL_SIZE};
use crate::raster::{laplacian, Image};
use crate::{Error, Result};

/// Dimension of the kernel coefficient space (t).
pub const DEFAULT_PCA_DIMS: usize = 8;
/// Candidate kernels per dynamic layer (N).
pub const DEFAULT_CANDIDATES: usize = 4;
/// Minimum kernel sample count for fitting the projector.
pub const MIN_PROJECTOR_SAMPLES: usize = 1000;

// ---------------------------------------------------------------------------
// Kernel projector
// ---------------------------------------------------------------------------

/// Linear projector from flattened 15x15 kernels onto the leading
/// principal components of the sampled dynamic-kernel population.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelProjector {
    dims: usize,
    /// Mean of the fitted kernel sample, length 225.
    mean: Vec<f64>,
    /// Orthonormal rows, `dims` x 225 row-major.
    basis: Vec<f64>,
}

impl KernelProjector {
    /// Fits the projector by PCA over `samples` random dynamic kernels.
    pub fn fit(bank: &KernelBank, samples: usize, dims: usize, seed: u64) -> Result<Self> {
        if samples < MIN_PROJECTOR_SAMPLES {
            return Err(Error::arg(format!(
                "projector fit needs at least {MIN_PROJECTOR_SAMPLES} samples, got {samples}"
            )));
        }
        let dim = KERNEL_SIZE * KERNEL_SIZE;
        if dims == 0 || dims > dim {
            return Err(Error::arg(format!(
                "projector dims must lie in 1..={dim}, got {dims}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(samples * dim);
        for _ in 0..samples {
            data.extend_from_slice(sample_dynamic_kernel(bank, &mut rng).kernel());
        }

        let mut mean = vec![0.0; dim];
        for row in data.chunks_exact(dim) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= samples as f64;
        }
        for row in data.chunks_exact_mut(dim) {
            for (v, &m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
        }

        let mut cov = vec![0.0; dim * dim];
        crate::autodiff::gram_matrix(&data, samples, dim, &mut cov);
        for v in &mut cov {
            *v /= samples as f64;
        }

        let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
        if trace < 1e-15 {
            return Err(Error::arg(
                "projector fit: kernel sample covariance is degenerate".to_string(),
            ));
        }

        let mut basis = Vec::with_capacity(dims * dim);
        for comp in 0..dims {
            let v = principal_component(&mut cov, dim, &basis, comp)?;
            basis.extend_from_slice(&v);
        }

        // Final re-orthonormalization pass with canonical signs.
        gram_schmidt_rows(&mut basis, dims, dim)?;
        Ok(KernelProjector { dims, mean, basis })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn basis(&self) -> &[f64] {
        &self.basis
    }

    pub(crate) fn from_parts(dims: usize, mean: Vec<f64>, basis: Vec<f64>) -> Self {
        KernelProjector { dims, mean, basis }
    }

    /// Coefficients of a kernel in the projector basis.
    pub fn project(&self, kernel: &DynamicKernel) -> Vec<f64> {
        self.project_raw(kernel.kernel())
    }

    /// Coefficients of raw flattened kernel values.
    pub fn project_raw(&self, kernel: &[f64]) -> Vec<f64> {
        let dim = self.mean.len();
        let centered: Vec<f64> = kernel.iter().zip(&self.mean).map(|(&v, &m)| v - m).collect();
        (0..self.dims)
            .map(|r| {
                self.basis[r * dim..(r + 1) * dim]
                    .iter()
                    .zip(&centered)
                    .map(|(&b, &c)| b * c)
                    .sum()
            })
            .collect()
    }

    /// Kernel reconstructed from coefficients: mean + basis^T c.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Vec<f64> {
        let dim = self.mean.len();
        let mut out = self.mean.clone();
        for (r, &c) in coeffs.iter().enumerate().take(self.dims) {
            for (o, &b) in out.iter_mut().zip(&self.basis[r * dim..(r + 1) * dim]) {
                *o += c * b;
            }
        }
        out
    }

    /// Projects a kernel and broadcasts each coefficient to an HxW plane,
    /// giving a [dims,H,W] conditioning tensor.
    pub fn stretch(&self, kernel: &DynamicKernel, h: usize, w: usize) -> Tensor {
        let coeffs = self.project(kernel);
        let mut data = Vec::with_capacity(self.dims * h * w);
        for &c in &coeffs {
            data.extend(std::iter::repeat(c).take(h * w));
        }
        Tensor {
            shape: vec![self.dims, h, w],
            data,
        }
    }
}

/// Extracts the dominant eigenvector of `cov` by power iteration, deflates
/// `cov` in place, and returns the sign-canonicalized vector.
fn principal_component(
    cov: &mut [f64],
    dim: usize,
    prior: &[f64],
    comp: usize,
) -> Result<Vec<f64>> {
    let max_diag = (0..dim)
        .map(|i| cov[i * dim + i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max_diag <= 1e-14 {
        return Err(Error::arg(format!(
            "projector fit: covariance rank is below requested component {comp}"
        )));
    }
    let start = (0..dim)
        .max_by(|&a, &b| {
            cov[a * dim + a]
                .partial_cmp(&cov[b * dim + b])
                .expect("finite covariance diagonal")
        })
        .expect("nonzero dimension");
    let mut v = vec![0.0; dim];
    v[start] = 1.0;

    let n_prior = prior.len() / dim;
    let mut next = vec![0.0; dim];
    for _ in 0..300 {
        for (r, nv) in next.iter_mut().enumerate() {
            *nv = cov[r * dim..(r + 1) * dim]
                .iter()
                .zip(&v)
                .map(|(&c, &x)| c * x)
                .sum();
        }
        // Guard against drift back into already-extracted components.
        for p in 0..n_prior {
            let row = &prior[p * dim..(p + 1) * dim];
            let dot: f64 = row.iter().zip(&next).map(|(&a, &b)| a * b).sum();
            for (nv, &b) in next.iter_mut().zip(row) {
                *nv -= dot * b;
            }
        }
        let norm = next.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if norm < 1e-18 {
            return Err(Error::arg(format!(
                "projector fit: power iteration collapsed at component {comp}"
            )));
        }
        let mut delta: f64 = 0.0;
        for (nv, xv) in next.iter_mut().zip(v.iter_mut()) {
            *nv /= norm;
            delta = delta.max((*nv - *xv).abs());
            *xv = *nv;
        }
        if delta < 1e-13 {
            break;
        }
    }

    let lambda: f64 = {
        let mut cv = vec![0.0; dim];
        for (r, out) in cv.iter_mut().enumerate() {
            *out = cov[r * dim..(r + 1) * dim]
                .iter()
                .zip(&v)
                .map(|(&c, &x)| c * x)
                .sum();
        }
        cv.iter().zip(&v).map(|(&a, &b)| a * b).sum()
    };
    for r in 0..dim {
        for c in 0..dim {
            cov[r * dim + c] -= lambda * v[r] * v[c];
        }
    }
    Ok(v)
}

/// Orthonormalizes the rows in place and fixes each row's sign so its
/// largest-magnitude entry is positive.
fn gram_schmidt_rows(rows: &mut [f64], n: usize, dim: usize) -> Result<()> {
    for r in 0..n {
        for p in 0..r {
            let dot: f64 = {
                let (head, tail) = rows.split_at(r * dim);
                let prow = &head[p * dim..(p + 1) * dim];
                prow.iter().zip(&tail[..dim]).map(|(&a, &b)| a * b).sum()
            };
            let (head, tail) = rows.split_at_mut(r * dim);
            let prow = &head[p * dim..(p + 1) * dim];
            for (v, &b) in tail[..dim].iter_mut().zip(prow) {
                *v -= dot * b;
            }
        }
        let row = &mut rows[r * dim..(r + 1) * dim];
        let norm = row.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::arg(format!(
                "projector fit: basis row {r} degenerated during orthonormalization"
            )));
        }
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v.abs() > row[best].abs() {
                best = i;
            }
        }
        let sign = if row[best] < 0.0 { -1.0 } else { 1.0 };
        for v in row.iter_mut() {
            *v = *v / norm * sign;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Network configuration and parameters
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    Static,
    Dynamic,
}

impl FromStr for BranchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(BranchKind::Static),
            "dynamic" => Ok(BranchKind::Dynamic),
            other => Err(Error::arg(format!(
                "branch kind must be 'static' or 'dynamic', got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for BranchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BranchKind::Static => "static",
            BranchKind::Dynamic => "dynamic",
        })
    }
}

/// Architecture hyperparameters. Defaults give the reference model; tests
/// shrink the widths to keep exhaustive gradient checks affordable.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub branch_kind: BranchKind,
    pub candidates: usize,
    pub pca_dims: usize,
    pub eq6_literal: bool,
    pub condition_branches: bool,
    pub condition_fusion: bool,
    pub branch_widths: [usize; 3],
    pub fusion_widths: [usize; 3],
    pub conv_kernel: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            branch_kind: BranchKind::Dynamic,
            candidates: DEFAULT_CANDIDATES,
            pca_dims: DEFAULT_PCA_DIMS,
            eq6_literal: true,
            condition_branches: true,
            condition_fusion: true,
            branch_widths: [16, 32, 32],
            fusion_widths: [64, 32, 16],
            conv_kernel: 3,
        }
    }
}

impl NetworkConfig {
    fn branch_input_channels(&self) -> usize {
        1 + if self.condition_branches { self.pca_dims } else { 0 }
    }

    fn fusion_input_channels(&self) -> usize {
        2 * self.branch_widths[2] + if self.condition_fusion { 2 * self.pca_dims } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::arg("candidate count must be >= 1".to_string()));
        }
        if self.pca_dims == 0 {
            return Err(Error::arg("pca dims must be >= 1".to_string()));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::arg(format!(
                "conv kernel size must be odd, got {}",
                self.conv_kernel
            )));
        }
        if self.branch_widths.iter().chain(&self.fusion_widths).any(|&w| w == 0) {
            return Err(Error::arg("layer widths must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// One convolution layer, static or dynamic per configuration.
#[derive(Clone, Debug, PartialEq)]
pub enum ConvLayer {
    Static(StaticConv),
    Dynamic(DynamicConvLayer),
}

impl ConvLayer {
    fn init(
        kind: BranchKind,
        c_in: usize,
        c_out: usize,
        cfg: &NetworkConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match kind {
            BranchKind::Static => ConvLayer::Static(StaticConv::init(c_in, c_out, cfg.conv_kernel, rng)),
            BranchKind::Dynamic => ConvLayer::Dynamic(DynamicConvLayer::init(
                c_in,
                c_out,
                cfg.conv_kernel,
                cfg.candidates,
                cfg.eq6_literal,
                rng,
            )?),
        })
    }

    fn forward_infer(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            ConvLayer::Static(l) => static_forward_infer(&l.w, &l.b, input),
            ConvLayer::Dynamic(l) => dynamic_forward_infer(l, input),
        }
    }
}

/// All trainable parameters plus the frozen kernel projector.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub branch_v: Vec<ConvLayer>,
    pub head_v: StaticConv,
    pub branch_i: Vec<ConvLayer>,
    pub head_i: StaticConv,
    pub fusion: Vec<DynamicConvLayer>,
    pub projector: KernelProjector,
}

impl NetworkParams {
    /// He-style initialization; deterministic in `seed`.
    pub fn init(config: NetworkConfig, projector: KernelProjector, seed: u64) -> Result<Self> {
        config.validate()?;
        if projector.dims() != config.pca_dims {
            return Err(Error::shape(
                "pca dims",
                config.pca_dims,
                projector.dims(),
                "NetworkParams::init",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.conv_kernel;
        let branch = |rng: &mut ChaCha8Rng| -> Result<(Vec<ConvLayer>, StaticConv)> {
            let mut layers = Vec::with_capacity(3);
            let mut c_in = config.branch_input_channels();
            for &c_out in &config.branch_widths {
                layers.push(ConvLayer::init(config.branch_kind, c_in, c_out, &config, rng)?);
                c_in = c_out;
            }
            let head = StaticConv::init(c_in, 1, k, rng);
            Ok((layers, head))
        };
        let (branch_v, head_v) = branch(&mut rng)?;
        let (branch_i, head_i) = branch(&mut rng)?;

        let mut fusion = Vec::with_capacity(4);
        let mut c_in = config.fusion_input_channels();
        for &c_out in config.fusion_widths.iter().chain(std::iter::once(&1)) {
            fusion.push(DynamicConvLayer::init(
                c_in,
                c_out,
                k,
                config.candidates,
                config.eq6_literal,
                &mut rng,
            )?);
            c_in = c_out;
        }
        Ok(NetworkParams {
            config,
            branch_v,
            head_v,
            branch_i,
            head_i,
            fusion,
            projector,
        })
    }

    /// Mutable references to every trainable tensor, in the fixed order
    /// shared with `StagedNetwork::leaves`.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let branches = [
            (&mut self.branch_v, &mut self.head_v),
            (&mut self.branch_i, &mut self.head_i),
        ];
        for (layers, head) in branches {
            for layer in layers.iter_mut() {
                match layer {
                    ConvLayer::Static(l) => {
                        out.push(&mut l.w);
                        out.push(&mut l.b);
                    }
                    ConvLayer::Dynamic(l) => push_dynamic_mut(&mut out, l),
                }
            }
            out.push(&mut head.w);
            out.push(&mut head.b);
        }
        for l in self.fusion.iter_mut() {
            push_dynamic_mut(&mut out, l);
        }
        out
    }
}

fn push_dynamic_mut<'a>(out: &mut Vec<&'a mut Tensor>, l: &'a mut DynamicConvLayer) {
    for t in l.cand_w.iter_mut() {
        out.push(t);
    }
    for t in l.cand_b.iter_mut() {
        out.push(t);
    }
    out.push(&mut l.attn_w1);
    out.push(&mut l.attn_b1);
    out.push(&mut l.attn_w2);
    out.push(&mut l.attn_b2);
}

// ---------------------------------------------------------------------------
// Staged network and forward passes
// ---------------------------------------------------------------------------

enum StagedConvLayer {
    Static { w: DiffArray, b: DiffArray },
    Dynamic(StagedDynamicConv),
}

impl StagedConvLayer {
    fn forward(&self, tape: &Tape, input: &DiffArray) -> Result<DiffArray> {
        match self {
            StagedConvLayer::Static { w, b } => static_forward(tape, w, b, input),
            StagedConvLayer::Dynamic(l) => dynamic_forward(tape, l, input),
        }
    }

    fn params(&self, out: &mut Vec<DiffArray>) {
        match self {
            StagedConvLayer::Static { w, b } => {
                out.push(w.clone());
                out.push(b.clone());
            }
            StagedConvLayer::Dynamic(l) => out.extend(l.params()),
        }
    }
}

/// Network parameters registered on a tape for one forward/backward pass.
pub struct StagedNetwork {
    config: NetworkConfig,
    branch_v: Vec<StagedConvLayer>,
    head_v: (DiffArray, DiffArray),
    branch_i: Vec<StagedConvLayer>,
    head_i: (DiffArray, DiffArray),
    fusion: Vec<StagedDynamicConv>,
    projector: KernelProjector,
}

/// Restoration and fusion outputs of one forward pass, each in [0,1].
pub struct ForwardOutputs {
    pub restored_v: DiffArray,
    pub restored_i: DiffArray,
    pub fused: DiffArray,
}

impl NetworkParams {
    pub fn stage(&self, tape: &Tape) -> StagedNetwork {
        let stage_layer = |layer: &ConvLayer| match layer {
            ConvLayer::Static(l) => StagedConvLayer::Static {
                w: tape.leaf(&l.w),
                b: tape.leaf(&l.b),
            },
            ConvLayer::Dynamic(l) => StagedConvLayer::Dynamic(l.stage(tape)),
        };
        StagedNetwork {
            config: self.config.clone(),
            branch_v: self.branch_v.iter().map(stage_layer).collect(),
            head_v: (tape.leaf(&self.head_v.w), tape.leaf(&self.head_v.b)),
            branch_i: self.branch_i.iter().map(stage_layer).collect(),
            head_i: (tape.leaf(&self.head_i.w), tape.leaf(&self.head_i.b)),
            fusion: self.fusion.iter().map(|l| l.stage(tape)).collect(),
            projector: self.projector.clone(),
        }
    }
}

impl StagedNetwork {
    /// Parameter handles in the fixed order shared with
    /// `NetworkParams::trainable_mut`.
    pub fn leaves(&self) -> Vec<DiffArray> {
        let mut out = Vec::new();
        for (layers, head) in [(&self.branch_v, &self.head_v), (&self.branch_i, &self.head_i)] {
            for layer in layers {
                layer.params(&mut out);
            }
            out.push(head.0.clone());
            out.push(head.1.clone());
        }
        for l in &self.fusion {
            out.extend(l.params());
        }
        out
    }

    /// Runs both restoration branches and the fusion module.
    ///
    /// Inputs must share dimensions; upsample scale-2 degraded images
    /// before calling. The kernels condition the branches and the fusion
    /// concat according to the configuration.
    pub fn forward(
        &self,
        tape: &Tape,
        x_v: &Image,
        x_i: &Image,
        k_v: &DynamicKernel,
        k_i: &DynamicKernel,
    ) -> Result<ForwardOutputs> {
        if x_v.h() != x_i.h() {
            return Err(Error::shape("height", x_v.h(), x_i.h(), "forward inputs"));
        }
        if x_v.w() != x_i.w() {
            return Err(Error::shape("width", x_v.w(), x_i.w(), "forward inputs"));
        }
        let (h, w) = (x_v.h(), x_v.w());
        let stretch_v = DiffArray::constant(&self.projector.stretch(k_v, h, w));
        let stretch_i = DiffArray::constant(&self.projector.stretch(k_i, h, w));
        let in_v = DiffArray::constant(&x_v.to_tensor());
        let in_i = DiffArray::constant(&x_i.to_tensor());

        let run_branch = |layers: &[StagedConvLayer],
                          head: &(DiffArray, DiffArray),
                          input: &DiffArray,
                          stretch: &DiffArray|
         -> Result<(DiffArray, DiffArray)> {
            let mut x = if self.config.condition_branches {
                tape.concat_channels(&[input, stretch])?
            } else {
                input.clone()
            };
            for layer in layers {
                x = tape.relu(&layer.forward(tape, &x)?);
            }
            let restored = tape.sigmoid(&static_forward(tape, &head.0, &head.1, &x)?);
            Ok((x, restored))
        };
        let (f_v, restored_v) = run_branch(&self.branch_v, &self.head_v, &in_v, &stretch_v)?;
        let (f_i, restored_i) = run_branch(&self.branch_i, &self.head_i, &in_i, &stretch_i)?;

        let mut x = if self.config.condition_fusion {
            tape.concat_channels(&[&f_v, &f_i, &stretch_v, &stretch_i])?
        } else {
            tape.concat_channels(&[&f_v, &f_i])?
        };
        let last = self.fusion.len() - 1;
        for (i, layer) in self.fusion.iter().enumerate() {
            x = dynamic_forward(tape, layer, &x)?;
            if i < last {
                x = tape.relu(&x);
            }
        }
        let fused = tape.sigmoid(&x);
        Ok(ForwardOutputs {
            restored_v,
            restored_i,
            fused,
        })
    }
}

/// No-tape forward pass; bit-identical to the staged path.
pub fn forward_infer(
    params: &NetworkParams,
    x_v: &Image,
    x_i: &Image,
    k_v: &DynamicKernel,
    k_i: &DynamicKernel,
) -> Result<(Image, Image, Image)> {
    if x_v.h() != x_i.h() || x_v.w() != x_i.w() {
        return Err(Error::shape("height", x_v.h(), x_i.h(), "forward inputs"));
    }
    let (h, w) = (x_v.h(), x_v.w());
    let cfg = &params.config;
    let stretch_v = params.projector.stretch(k_v, h, w);
    let stretch_i = params.projector.stretch(k_i, h, w);

    let run_branch = |layers: &[ConvLayer],
                      head: &StaticConv,
                      input: &Image,
                      stretch: &Tensor|
     -> Result<(Tensor, Image)> {
        let mut x = if cfg.condition_branches {
            concat_values(&[&input.to_tensor(), stretch])?
        } else {
            input.to_tensor()
        };
        for layer in layers {
            let y = layer.forward_infer(&x)?;
            x = Tensor {
                shape: y.shape.clone(),
                data: relu_forward(&y.data),
            };
        }
        let head_out = static_forward_infer(&head.w, &head.b, &x)?;
        let restored = Image::new(h, w, sigmoid_forward(&head_out.data))?;
        Ok((x, restored))
    };
    let (f_v, restored_v) = run_branch(&params.branch_v, &params.head_v, x_v, &stretch_v)?;
    let (f_i, restored_i) = run_branch(&params.branch_i, &params.head_i, x_i, &stretch_i)?;

    let mut x = if cfg.condition_fusion {
        concat_values(&[&f_v, &f_i, &stretch_v, &stretch_i])?
    } else {
        concat_values(&[&f_v, &f_i])?
    };
    let last = params.fusion.len() - 1;
    for (i, layer) in params.fusion.iter().enumerate() {
        x = dynamic_forward_infer(layer, &x)?;
        if i < last {
            x.data = relu_forward(&x.data);
        }
    }
    let fused = Image::new(h, w, sigmoid_forward(&x.data))?;
    Ok((restored_v, restored_i, fused))
}

// ---------------------------------------------------------------------------
// Manual fusion reference
// ---------------------------------------------------------------------------

/// Training-free fusion: per-pixel maximum plus half the Laplacian detail
/// of the non-selected input, clamped to [0,1]. Ties within 1e-9 take the
/// maximum with no detail term.
pub fn fuse_manual(a: &Image, b: &Image) -> Result<Image> {
    if a.h() != b.h() {
        return Err(Error::shape("height", a.h(), b.h(), "fuse_manual"));
    }
    if a.w() != b.w() {
        return Err(Error::shape("width", a.w(), b.w(), "fuse_manual"));
    }
    let lap_a = laplacian(a);
    let lap_b = laplacian(b);
    let mut out = Image::zeros(a.h(), a.w());
    for i in 0..a.data().len() {
        let (va, vb) = (a.data()[i], b.data()[i]);
        let v = if (va - vb).abs() <= 1e-9 {
            va.max(vb)
        } else if va > vb {
            va + 0.5 * lap_b.data()[i]
        } else {
            vb + 0.5 * lap_a.data()[i]
        };
        out.data_mut()[i] = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

/// Run provenance carried alongside the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub bank_seed: u64,
    pub scale: u32,
}

const CHECKPOINT_MAGIC: &str = "ddrf-checkpoint v1";

type NamedArrays = Vec<(String, Vec<usize>, Vec<f64>)>;

fn push_named(out: &mut NamedArrays, name: String, t: &Tensor) {
    out.push((name, t.shape.clone(), t.data.clone()));
}

fn push_layer_named(out: &mut NamedArrays, prefix: &str, layer: &ConvLayer) {
    match layer {
        ConvLayer::Static(l) => {
            push_named(out, format!("{prefix}.w"), &l.w);
            push_named(out, format!("{prefix}.b"), &l.b);
        }
        ConvLayer::Dynamic(l) => push_dynamic_named(prefix, l, out),
    }
}

fn named_arrays(params: &NetworkParams) -> NamedArrays {
    let mut out = Vec::new();
    for (i, l) in params.branch_v.iter().enumerate() {
        push_layer_named(&mut out, &format!("branch-v.{i}"), l);
    }
    push_named(&mut out, "head-v.w".to_string(), &params.head_v.w);
    push_named(&mut out, "head-v.b".to_string(), &params.head_v.b);
    for (i, l) in params.branch_i.iter().enumerate() {
        push_layer_named(&mut out, &format!("branch-i.{i}"), l);
    }
    push_named(&mut out, "head-i.w".to_string(), &params.head_i.w);
    push_named(&mut out, "head-i.b".to_string(), &params.head_i.b);
    for (i, l) in params.fusion.iter().enumerate() {
        push_dynamic_named(&format!("fusion.{i}"), l, &mut out);
    }
    let dim = params.projector.mean().len();
    out.push((
        "projector.mean".to_string(),
        vec![dim],
        params.projector.mean().to_vec(),
    ));
    out.push((
        "projector.basis".to_string(),
        vec![params.projector.dims(), dim],
        params.projector.basis().to_vec(),
    ));
    out
}

fn push_dynamic_named(prefix: &str, l: &DynamicConvLayer, out: &mut NamedArrays) {
    for (k, t) in l.cand_w.iter().enumerate() {
        push_named(out, format!("{prefix}.cand-w.{k}"), t);
    }
    for (k, t) in l.cand_b.iter().enumerate() {
        push_named(out, format!("{prefix}.cand-b.{k}"), t);
    }
    push_named(out, format!("{prefix}.attn-w1"), &l.attn_w1);
    push_named(out, format!("{prefix}.attn-b1"), &l.attn_b1);
    push_named(out, format!("{prefix}.attn-w2"), &l.attn_w2);
    push_named(out, format!("{prefix}.attn-b2"), &l.attn_b2);
}

/// Writes a checkpoint: a text header with the configuration and array
/// manifest, then length-prefixed little-endian f64 blocks in manifest
/// order. Byte-identical for identical parameters.
pub fn save_checkpoint(path: &Path, params: &NetworkParams, meta: &CheckpointMeta) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let cfg = &params.config;
    let arrays = named_arrays(params);
    let io = |e| Error::io(path, e);

    let mut header = String::new();
    header.push_str(CHECKPOINT_MAGIC);
    header.push('\n');
    header.push_str(&format!("branch-kind={}\n", cfg.branch_kind));
    header.push_str(&format!("candidates={}\n", cfg.candidates));
    header.push_str(&format!("pca-dims={}\n", cfg.pca_dims));
    header.push_str(&format!("conv-kernel={}\n", cfg.conv_kernel));
    header.push_str(&format!(
        "branch-widths={},{},{}\n",
        cfg.branch_widths[0], cfg.branch_widths[1], cfg.branch_widths[2]
    ));
    header.push_str(&format!(
        "fusion-widths={},{},{}\n",
        cfg.fusion_widths[0], cfg.fusion_widths[1], cfg.fusion_widths[2]
    ));
    header.push_str(&format!("eq6-literal={}\n", cfg.eq6_literal as u8));
    header.push_str(&format!("condition-branches={}\n", cfg.condition_branches as u8));
    header.push_str(&format!("condition-fusion={}\n", cfg.condition_fusion as u8));
    header.push_str(&format!("degradation-kernel-size={KERNEL_SIZE}\n"));
    header.push_str(&format!("seed={}\n", meta.seed));
    header.push_str(&format!("bank-seed={}\n", meta.bank_seed));
    header.push_str(&format!("scale={}\n", meta.scale));
    header.push_str(&format!("arrays={}\n", arrays.len()));
    for (name, shape, _) in &arrays {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("array {name} {}\n", dims.join(",")));
    }
    header.push_str("end-header\n");
    w.write_all(header.as_bytes()).map_err(io)?;

    for (_, _, data) in &arrays {
        w.write_all(&(data.len() as u64).to_le_bytes()).map_err(io)?;
        for &v in data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a checkpoint written by `save_checkpoint`, validating the header
/// and every array shape.
pub fn load_checkpoint(path: &Path) -> Result<(NetworkParams, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header_end = find_header_end(&bytes)
        .ok_or_else(|| Error::data(format!("{}: missing end-header marker", path.display())))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::data(format!("{}: header is not UTF-8", path.display())))?;
    let mut lines = header.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::data(format!(
            "{}: bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}",
            path.display()
        )));
    }

    let mut fields = std::collections::BTreeMap::new();
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
    for line in lines {
        if line == "end-header" {
            break;
        }
        if let Some(rest) = line.strip_prefix("array ") {
            let (name, dims) = rest
                .split_once(' ')
                .ok_or_else(|| Error::data(format!("malformed array line {line:?}")))?;
            let shape = dims
                .split(',')
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|_| Error::data(format!("bad dimension {d:?} in {line:?}")))
                })
                .collect::<Result<Vec<usize>>>()?;
            manifest.push((name.to_string(), shape));
        } else if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.to_string(), v.to_string());
        } else {
            return Err(Error::data(format!("malformed header line {line:?}")));
        }
    }

    let get = |key: &str| -> Result<&String> {
        fields
            .get(key)
            .ok_or_else(|| Error::data(format!("checkpoint missing field {key:?}")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::data(format!("bad value for {key:?}")))
    };
    let parse_bool = |key: &str| -> Result<bool> {
        match get(key)?.as_str() {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::data(format!("bad flag {other:?} for {key:?}"))),
        }
    };
    let parse_triple = |key: &str| -> Result<[usize; 3]> {
        let v = get(key)?;
        let parts: Vec<usize> = v
            .split(',')
            .map(|p| p.parse().map_err(|_| Error::data(format!("bad value for {key:?}"))))
            .collect::<Result<_>>()?;
        if parts.len() != 3 {
            return Err(Error::data(format!("{key:?} needs 3 entries, got {}", parts.len())));
        }
        Ok([parts[0], parts[1], parts[2]])
    };

    let config = NetworkConfig {
        branch_kind: get("branch-kind")?.parse()?,
        candidates: parse_usize("candidates")?,
        pca_dims: parse_usize("pca-dims")?,
        eq6_literal: parse_bool("eq6-literal")?,
        condition_branches: parse_bool("condition-branches")?,
        condition_fusion: parse_bool("condition-fusion")?,
        branch_widths: parse_triple("branch-widths")?,
        fusion_widths: parse_triple("fusion-widths")?,
        conv_kernel: parse_usize("conv-kernel")?,
    };
    let kernel_size = parse_usize("degradation-kernel-size")?;
    if kernel_size != KERNEL_SIZE {
        return Err(Error::data(format!(
            "checkpoint degradation kernel size {kernel_size} differs from supported {KERNEL_SIZE}"
        )));
    }
    let meta = CheckpointMeta {
        seed: parse_usize("seed")? as u64,
        bank_seed: parse_usize("bank-seed")? as u64,
        scale: parse_usize("scale")? as u32,
    };
    let declared = parse_usize("arrays")?;
    if declared != manifest.len() {
        return Err(Error::data(format!(
            "checkpoint declares {declared} arrays but lists {}",
            manifest.len()
        )));
    }

    let mut cursor = &bytes[header_end..];
    let mut read_block = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if cursor.len() < 8 {
            return Err(Error::data(format!("checkpoint truncated before array {name:?}")));
        }
        let mut len_bytes = [0u8; 8];
        cursor.read_exact(&mut len_bytes).expect("length checked");
        let n = u64::from_le_bytes(len_bytes) as usize;
        if n != expect {
            return Err(Error::shape("element count", expect, n, &format!("array {name}")));
        }
        if cursor.len() < 8 * n {
            return Err(Error::data(format!("checkpoint truncated inside array {name:?}")));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in cursor[..8 * n].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
        }
        cursor = &cursor[8 * n..];
        Tensor::new(shape.to_vec(), data)
    };

    // Rebuild a skeleton with the right shapes, then fill it from the
    // manifest, insisting on exact name agreement.
    let projector = KernelProjector::from_parts(
        config.pca_dims,
        vec![0.0; KERNEL_SIZE * KERNEL_SIZE],
        vec![0.0; config.pca_dims * KERNEL_SIZE * KERNEL_SIZE],
    );
    let mut params = NetworkParams::init(config, projector, 0)?;
    let expected = named_arrays(&params);
    if manifest.len() != expected.len() {
        return Err(Error::data(format!(
            "checkpoint lists {} arrays, expected {} for this configuration",
            manifest.len(),
            expected.len()
        )));
    }
    let mut loaded: Vec<Tensor> = Vec::with_capacity(manifest.len());
    for ((name, shape), (want_name, want_shape, _)) in manifest.iter().zip(&expected) {
        if name != want_name {
            return Err(Error::data(format!(
                "checkpoint missing array {want_name:?} (found {name:?} instead)"
            )));
        }
        if shape != want_shape {
            return Err(Error::shape(
                "array shape product",
                want_shape.iter().product(),
                shape.iter().product(),
                &format!("array {name}"),
            ));
        }
        loaded.push(read_block(name, shape)?);
    }
    if !cursor.is_empty() {
        return Err(Error::data(format!(
            "checkpoint has {} trailing bytes after the last array",
            cursor.len()
        )));
    }

    let basis = loaded.pop().expect("projector basis present");
    let mean = loaded.pop().expect("projector mean present");
    params.projector = KernelProjector::from_parts(params.config.pca_dims, mean.data, basis.data);
    let mut it = loaded.into_iter();
    for slot in params.trainable_mut() {
        *slot = it.next().expect("manifest length validated");
    }
    debug_assert!(it.next().is_none());
    Ok((params, meta))
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let marker = b"end-header\n";
    bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .map(|p| p + marker.len())
}
