//! Dynamic convolution: several candidate kernels mixed per input by
//! channel-attention weights.
//!
//! The attention path is global average pool, a two-layer MLP with a
//! sigmoid hidden activation, and a softmax over candidates. The effective
//! kernel is the attention-weighted sum of candidates, optionally divided
//! by the candidate count when the literal averaging form is enabled.
//!
//! The tape path and the plain-tensor inference path share the same
//! numeric kernels and evaluation order, so their outputs match bit for
//! bit.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{
    affine_forward, conv2d_forward, gap_forward, sigmoid_forward, softmax_forward, ConvDims,
    DiffArray, Tape, Tensor,
};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Plain (single-kernel) convolution parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticConv {
    pub w: Tensor,
    pub b: Tensor,
}

impl StaticConv {
    pub fn init(c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Self {
        StaticConv {
            w: he_weights(c_out, c_in, k, rng),
            b: Tensor::zeros(vec![c_out]),
        }
    }
}

/// Parameters of one dynamic convolution layer.
///
/// The second attention layer starts at zero so the initial mixture is
/// uniform over candidates. Candidate weights carry a compensating gain
/// so the uniform mixture (after any literal 1/N factor) has He variance;
/// without it every dynamic layer attenuates signals and gradients by
/// N^1.5 and deep stacks start effectively dead.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicConvLayer {
    pub cand_w: Vec<Tensor>,
    pub cand_b: Vec<Tensor>,
    pub attn_w1: Tensor,
    pub attn_b1: Tensor,
    pub attn_w2: Tensor,
    pub attn_b2: Tensor,
    pub eq6_literal: bool,
}

/// Attention hidden width for a given input channel count.
pub fn attention_hidden(c_in: usize) -> usize {
    c_in.div_ceil(4)
}

impl DynamicConvLayer {
    pub fn init(
        c_in: usize,
        c_out: usize,
        k: usize,
        candidates: usize,
        eq6_literal: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if candidates == 0 {
            return Err(Error::arg("dynamic conv needs at least 1 candidate".to_string()));
        }
        let hidden = attention_hidden(c_in);
        // Uniform mixing averages N independent kernels (variance /N) and
        // the literal form divides by N again (variance /N^2).
        let gain = if eq6_literal {
            (candidates as f64).powf(1.5)
        } else {
            (candidates as f64).sqrt()
        };
        let cand_w = (0..candidates)
            .map(|_| scaled_weights(c_out, c_in, k, gain, rng))
            .collect();
        let cand_b = (0..candidates).map(|_| Tensor::zeros(vec![c_out])).collect();
        let w1_std = (1.0 / c_in as f64).sqrt();
        let normal = Normal::new(0.0, w1_std).expect("finite std");
        let attn_w1 = Tensor {
            shape: vec![hidden, c_in],
            data: (0..hidden * c_in).map(|_| normal.sample(rng)).collect(),
        };
        Ok(DynamicConvLayer {
            cand_w,
            cand_b,
            attn_w1,
            attn_b1: Tensor::zeros(vec![hidden]),
            attn_w2: Tensor::zeros(vec![candidates, hidden]),
            attn_b2: Tensor::zeros(vec![candidates]),
            eq6_literal,
        })
    }

    pub fn candidates(&self) -> usize {
        self.cand_w.len()
    }
}

fn he_weights(c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    scaled_weights(c_out, c_in, k, 1.0, rng)
}

fn scaled_weights(c_out: usize, c_in: usize, k: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let std = gain * (2.0 / (c_in * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor {
        shape: vec![c_out, c_in, k, k],
        data: (0..c_out * c_in * k * k).map(|_| normal.sample(rng)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Staged (on-tape) layers
// ---------------------------------------------------------------------------

/// A dynamic layer's parameters registered on a tape.
#[derive(Clone)]
pub struct StagedDynamicConv {
    pub cand_w: Vec<DiffArray>,
    pub cand_b: Vec<DiffArray>,
    pub attn_w1: DiffArray,
    pub attn_b1: DiffArray,
    pub attn_w2: DiffArray,
    pub attn_b2: DiffArray,
    pub eq6_literal: bool,
}

impl DynamicConvLayer {
    pub fn stage(&self, tape: &Tape) -> StagedDynamicConv {
        StagedDynamicConv {
            cand_w: self.cand_w.iter().map(|t| tape.leaf(t)).collect(),
            cand_b: self.cand_b.iter().map(|t| tape.leaf(t)).collect(),
            attn_w1: tape.leaf(&self.attn_w1),
            attn_b1: tape.leaf(&self.attn_b1),
            attn_w2: tape.leaf(&self.attn_w2),
            attn_b2: tape.leaf(&self.attn_b2),
            eq6_literal: self.eq6_literal,
        }
    }
}

impl StagedDynamicConv {
    /// Parameter handles in declaration order.
    pub fn params(&self) -> Vec<DiffArray> {
        let mut out = Vec::with_capacity(2 * self.cand_w.len() + 4);
        out.extend(self.cand_w.iter().cloned());
        out.extend(self.cand_b.iter().cloned());
        out.push(self.attn_w1.clone());
        out.push(self.attn_b1.clone());
        out.push(self.attn_w2.clone());
        out.push(self.attn_b2.clone());
        out
    }
}

/// Attention mixture over candidates for the given input.
pub fn attention_pi(tape: &Tape, layer: &StagedDynamicConv, input: &DiffArray) -> Result<DiffArray> {
    let z = tape.global_avg_pool(input)?;
    let h = tape.sigmoid(&tape.affine(&layer.attn_w1, &z, &layer.attn_b1)?);
    let logits = tape.affine(&layer.attn_w2, &h, &layer.attn_b2)?;
    tape.softmax(&logits, 0)
}

/// Dynamic convolution forward pass: mix candidates by attention, then
/// convolve once with the effective kernel (stride 1, same padding).
pub fn dynamic_forward(tape: &Tape, layer: &StagedDynamicConv, input: &DiffArray) -> Result<DiffArray> {
    let n = layer.cand_w.len();
    let pi = attention_pi(tape, layer, input)?;
    let mut eff_w = tape.scale_by(&layer.cand_w[0], &tape.select(&pi, 0)?)?;
    let mut eff_b = tape.scale_by(&layer.cand_b[0], &tape.select(&pi, 0)?)?;
    for k in 1..n {
        let pik = tape.select(&pi, k)?;
        eff_w = tape.add(&eff_w, &tape.scale_by(&layer.cand_w[k], &pik)?)?;
        eff_b = tape.add(&eff_b, &tape.scale_by(&layer.cand_b[k], &pik)?)?;
    }
    if layer.eq6_literal {
        eff_w = tape.scalar_mul(&eff_w, 1.0 / n as f64);
        eff_b = tape.scalar_mul(&eff_b, 1.0 / n as f64);
    }
    let k = layer.cand_w[0].shape()[2];
    tape.conv2d(input, &eff_w, &eff_b, 1, (k - 1) / 2)
}

/// Single-kernel convolution forward pass (stride 1, same padding).
pub fn static_forward(tape: &Tape, w: &DiffArray, b: &DiffArray, input: &DiffArray) -> Result<DiffArray> {
    let k = w.shape()[2];
    tape.conv2d(input, w, b, 1, (k - 1) / 2)
}

// ---------------------------------------------------------------------------
// No-tape inference path
// ---------------------------------------------------------------------------

/// Inference-only dynamic convolution; bit-identical to `dynamic_forward`.
pub fn dynamic_forward_infer(layer: &DynamicConvLayer, input: &Tensor) -> Result<Tensor> {
    let n = layer.cand_w.len();
    let (c_in, h, w) = chw(input)?;
    let z = gap_forward(&input.data, c_in, h * w);
    let hidden = layer.attn_b1.len();
    let hvals = sigmoid_forward(&affine_forward(
        &layer.attn_w1.data,
        &layer.attn_b1.data,
        &z,
        hidden,
        c_in,
    ));
    let logits = affine_forward(&layer.attn_w2.data, &layer.attn_b2.data, &hvals, n, hidden);
    let pi = softmax_forward(&logits, &[n], 0);

    let mut eff_w = vec![0.0; layer.cand_w[0].len()];
    let mut eff_b = vec![0.0; layer.cand_b[0].len()];
    scale_into(&mut eff_w, &layer.cand_w[0].data, pi[0]);
    scale_into(&mut eff_b, &layer.cand_b[0].data, pi[0]);
    for k in 1..n {
        add_scaled(&mut eff_w, &layer.cand_w[k].data, pi[k]);
        add_scaled(&mut eff_b, &layer.cand_b[k].data, pi[k]);
    }
    if layer.eq6_literal {
        let inv = 1.0 / n as f64;
        for v in &mut eff_w {
            *v *= inv;
        }
        for v in &mut eff_b {
            *v *= inv;
        }
    }
    let c_out = layer.cand_w[0].shape[0];
    let k = layer.cand_w[0].shape[2];
    let dims = ConvDims::new(c_in, h, w, c_out, k, 1, (k - 1) / 2);
    Ok(Tensor {
        shape: vec![c_out, h, w],
        data: conv2d_forward(&input.data, &eff_w, &eff_b, &dims),
    })
}

/// Inference-only plain convolution; bit-identical to `static_forward`.
pub fn static_forward_infer(w: &Tensor, b: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (c_in, h, wd) = chw(input)?;
    let (c_out, k) = (w.shape[0], w.shape[2]);
    let dims = ConvDims::new(c_in, h, wd, c_out, k, 1, (k - 1) / 2);
    Ok(Tensor {
        shape: vec![c_out, h, wd],
        data: conv2d_forward(&input.data, &w.data, &b.data, &dims),
    })
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.shape.len() != 3 {
        return Err(Error::shape("rank", 3, t.shape.len(), "conv input"));
    }
    Ok((t.shape[0], t.shape[1], t.shape[2]))
}

fn scale_into(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = v * s;
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d += v * s;
    }
}
