//! Reverse-mode automatic differentiation over shaped f64 arrays.
//!
//! Every operation routed through a [`Tape`] appends a node to a Wengert
//! list; [`Tape::backward`] walks the list in reverse and accumulates
//! vector-Jacobian products. Array values are immutable and reference
//! counted, so sharing an array between ops never copies it.

mod ops;

pub(crate) use ops::{
    affine_forward, conv2d_forward, gap_forward, gram_matrix, relu_forward, sigmoid_forward,
    softmax_forward, upsample2_forward, ConvDims,
};

use std::cell::RefCell;
use std::rc::Rc;

use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Plain value arrays
// ---------------------------------------------------------------------------

/// Shaped f64 array in row-major order, with no gradient tracking.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("element count", n, data.len(), "Tensor::new"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Channel concatenation of [C,H,W] tensors without tape recording;
/// matches `Tape::concat_channels` bit for bit.
pub fn concat_values(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.len() < 2 {
        return Err(Error::arg(format!(
            "concat needs at least 2 inputs, got {}",
            parts.len()
        )));
    }
    let first = &parts[0].shape;
    if first.len() != 3 {
        return Err(Error::shape("rank", 3, first.len(), "concat"));
    }
    let (h, w) = (first[1], first[2]);
    let mut c_total = 0;
    for p in parts {
        if p.shape.len() != 3 {
            return Err(Error::shape("rank", 3, p.shape.len(), "concat"));
        }
        if p.shape[1] != h {
            return Err(Error::shape("height", h, p.shape[1], "concat"));
        }
        if p.shape[2] != w {
            return Err(Error::shape("width", w, p.shape[2], "concat"));
        }
        c_total += p.shape[0];
    }
    let mut data = Vec::with_capacity(c_total * h * w);
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Ok(Tensor {
        shape: vec![c_total, h, w],
        data,
    })
}

// ---------------------------------------------------------------------------
// Differentiable arrays
// ---------------------------------------------------------------------------

pub type NodeId = usize;

/// Handle to a shaped f64 array that may participate in a gradient graph.
///
/// `node` is `None` for constants created outside a tape; constants take
/// part in forward computation but receive no gradient.
#[derive(Clone, Debug)]
pub struct DiffArray {
    shape: Rc<[usize]>,
    values: Rc<[f64]>,
    node: Option<NodeId>,
}

impl DiffArray {
    /// Wraps a tensor as an untracked constant.
    pub fn constant(t: &Tensor) -> Self {
        DiffArray {
            shape: t.shape.clone().into(),
            values: t.data.clone().into(),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    /// Value of a single-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar array");
        self.values[0]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape.to_vec(),
            data: self.values.to_vec(),
        }
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    ScalarAdd(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Softmax {
        input: NodeId,
        axis: usize,
    },
    GlobalAvgPool(NodeId),
    Upsample2(NodeId),
    ConcatChannels(Vec<NodeId>),
    Conv2d {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    Affine {
        weights: NodeId,
        input: NodeId,
        bias: NodeId,
    },
    Select {
        input: NodeId,
        index: usize,
    },
    /// Elementwise product of an array with a scalar node.
    ScaleBy {
        input: NodeId,
        scalar: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Rc<[usize]>,
    values: Rc<[f64]>,
}

/// Records operations for one backward pass.
///
/// Ops take `&self`; interior mutability keeps call sites free of borrow
/// gymnastics. A tape is cheap to create and is normally dropped after one
/// training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op: Op, shape: Rc<[usize]>, values: Vec<f64>) -> DiffArray {
        let values: Rc<[f64]> = values.into();
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            shape: shape.clone(),
            values: values.clone(),
        });
        DiffArray {
            shape,
            values,
            node: Some(id),
        }
    }

    /// Registers a tensor as a gradient-receiving leaf.
    pub fn leaf(&self, t: &Tensor) -> DiffArray {
        let shape: Rc<[usize]> = t.shape.clone().into();
        let values: Rc<[f64]> = t.data.clone().into();
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op: Op::Leaf,
            shape: shape.clone(),
            values: values.clone(),
        });
        DiffArray {
            shape,
            values,
            node: Some(id),
        }
    }

    /// Node id of `a`, registering constants as fresh leaves on first use.
    fn id_of(&self, a: &DiffArray) -> NodeId {
        match a.node {
            Some(id) => id,
            None => {
                let mut nodes = self.nodes.borrow_mut();
                let id = nodes.len();
                nodes.push(Node {
                    op: Op::Leaf,
                    shape: a.shape.clone(),
                    values: a.values.clone(),
                });
                id
            }
        }
    }

    fn values_of(&self, id: NodeId) -> Rc<[f64]> {
        self.nodes.borrow()[id].values.clone()
    }

    fn shape_of(&self, id: NodeId) -> Rc<[usize]> {
        self.nodes.borrow()[id].shape.clone()
    }

    // -- elementwise -------------------------------------------------------

    fn binary(
        &self,
        a: &DiffArray,
        b: &DiffArray,
        context: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(NodeId, NodeId) -> Op,
    ) -> Result<DiffArray> {
        check_same_shape(a, b, context)?;
        let vals: Vec<f64> = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
        let (ia, ib) = (self.id_of(a), self.id_of(b));
        Ok(self.push(op(ia, ib), a.shape.clone(), vals))
    }

    pub fn add(&self, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: &DiffArray, b: &DiffArray) -> Result<DiffArray> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    pub fn scalar_mul(&self, a: &DiffArray, c: f64) -> DiffArray {
        let vals: Vec<f64> = a.values().iter().map(|&x| x * c).collect();
        let ia = self.id_of(a);
        self.push(Op::ScalarMul(ia, c), a.shape.clone(), vals)
    }

    pub fn scalar_add(&self, a: &DiffArray, c: f64) -> DiffArray {
        let vals: Vec<f64> = a.values().iter().map(|&x| x + c).collect();
        let ia = self.id_of(a);
        self.push(Op::ScalarAdd(ia), a.shape.clone(), vals)
    }

    pub fn sigmoid(&self, a: &DiffArray) -> DiffArray {
        let vals = sigmoid_forward(a.values());
        let ia = self.id_of(a);
        self.push(Op::Sigmoid(ia), a.shape.clone(), vals)
    }

    pub fn relu(&self, a: &DiffArray) -> DiffArray {
        let vals = relu_forward(a.values());
        let ia = self.id_of(a);
        self.push(Op::Relu(ia), a.shape.clone(), vals)
    }

    // -- reductions --------------------------------------------------------

    pub fn sum(&self, a: &DiffArray) -> DiffArray {
        let s = a.values().iter().sum();
        let ia = self.id_of(a);
        self.push(Op::Sum(ia), vec![1].into(), vec![s])
    }

    pub fn mean(&self, a: &DiffArray) -> DiffArray {
        let s: f64 = a.values().iter().sum();
        let ia = self.id_of(a);
        self.push(Op::Mean(ia), vec![1].into(), vec![s / a.len() as f64])
    }

    /// Softmax along one axis; lanes each sum to 1.
    pub fn softmax(&self, a: &DiffArray, axis: usize) -> Result<DiffArray> {
        if axis >= a.shape().len() {
            return Err(Error::arg(format!(
                "softmax axis {axis} out of range for rank {}",
                a.shape().len()
            )));
        }
        let vals = softmax_forward(a.values(), a.shape(), axis);
        let ia = self.id_of(a);
        Ok(self.push(Op::Softmax { input: ia, axis }, a.shape.clone(), vals))
    }

    /// Per-channel spatial mean: [C,H,W] -> [C].
    pub fn global_avg_pool(&self, a: &DiffArray) -> Result<DiffArray> {
        let [c, h, w] = require_chw(a, "global_avg_pool")?;
        let vals = gap_forward(a.values(), c, h * w);
        let ia = self.id_of(a);
        Ok(self.push(Op::GlobalAvgPool(ia), vec![c].into(), vals))
    }

    /// Bilinear upsample by an integer factor of 1 or 2.
    ///
    /// Factor 1 is the identity and records no node.
    pub fn upsample_bilinear(&self, a: &DiffArray, factor: u32) -> Result<DiffArray> {
        let [c, h, w] = require_chw(a, "upsample_bilinear")?;
        match factor {
            1 => Ok(a.clone()),
            2 => {
                let vals = upsample2_forward(a.values(), c, h, w);
                let ia = self.id_of(a);
                Ok(self.push(Op::Upsample2(ia), vec![c, h * 2, w * 2].into(), vals))
            }
            _ => Err(Error::arg(format!(
                "upsample factor must be 1 or 2, got {factor}"
            ))),
        }
    }

    /// Concatenates [C_i,H,W] arrays along the channel axis.
    pub fn concat_channels(&self, parts: &[&DiffArray]) -> Result<DiffArray> {
        if parts.len() < 2 {
            return Err(Error::arg(format!(
                "concat_channels needs at least 2 inputs, got {}",
                parts.len()
            )));
        }
        let [_, h, w] = require_chw(parts[0], "concat_channels")?;
        let mut c_total = 0;
        for p in parts {
            let [c, ph, pw] = require_chw(p, "concat_channels")?;
            if ph != h {
                return Err(Error::shape("height", h, ph, "concat_channels"));
            }
            if pw != w {
                return Err(Error::shape("width", w, pw, "concat_channels"));
            }
            c_total += c;
        }
        let mut vals = Vec::with_capacity(c_total * h * w);
        for p in parts {
            vals.extend_from_slice(p.values());
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| self.id_of(p)).collect();
        Ok(self.push(Op::ConcatChannels(ids), vec![c_total, h, w].into(), vals))
    }

    /// 2-D convolution: input [C_in,H,W], weights [C_out,C_in,k,k],
    /// bias [C_out]; square odd kernel, zero padding.
    pub fn conv2d(
        &self,
        input: &DiffArray,
        weights: &DiffArray,
        bias: &DiffArray,
        stride: usize,
        padding: usize,
    ) -> Result<DiffArray> {
        let [c_in, h, w] = require_chw(input, "conv2d input")?;
        let ws = weights.shape();
        if ws.len() != 4 {
            return Err(Error::shape("rank", 4, ws.len(), "conv2d weights"));
        }
        let (c_out, wc_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc_in != c_in {
            return Err(Error::shape("input channels", c_in, wc_in, "conv2d"));
        }
        if kh != kw {
            return Err(Error::shape("kernel height vs width", kh, kw, "conv2d"));
        }
        if kh % 2 == 0 {
            return Err(Error::arg(format!("conv2d kernel size must be odd, got {kh}")));
        }
        if bias.shape() != [c_out] {
            return Err(Error::shape("bias length", c_out, bias.len(), "conv2d"));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d stride must be >= 1".to_string()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kh {
            return Err(Error::arg(format!(
                "conv2d input {h}x{w} with padding {padding} is smaller than kernel {kh}"
            )));
        }
        let dims = ConvDims::new(c_in, h, w, c_out, kh, stride, padding);
        let vals = conv2d_forward(input.values(), weights.values(), bias.values(), &dims);
        let (ii, iw, ib) = (self.id_of(input), self.id_of(weights), self.id_of(bias));
        Ok(self.push(
            Op::Conv2d {
                input: ii,
                weights: iw,
                bias: ib,
                stride,
                padding,
            },
            vec![c_out, dims.h_out, dims.w_out].into(),
            vals,
        ))
    }

    /// Fully connected map: weights [O,I], input [I], bias [O].
    pub fn affine(&self, weights: &DiffArray, input: &DiffArray, bias: &DiffArray) -> Result<DiffArray> {
        let ws = weights.shape();
        if ws.len() != 2 {
            return Err(Error::shape("rank", 2, ws.len(), "affine weights"));
        }
        let (o, i) = (ws[0], ws[1]);
        if input.shape() != [i] {
            return Err(Error::shape("input length", i, input.len(), "affine"));
        }
        if bias.shape() != [o] {
            return Err(Error::shape("bias length", o, bias.len(), "affine"));
        }
        let vals = affine_forward(weights.values(), bias.values(), input.values(), o, i);
        let (iw, ii, ib) = (self.id_of(weights), self.id_of(input), self.id_of(bias));
        Ok(self.push(
            Op::Affine {
                weights: iw,
                input: ii,
                bias: ib,
            },
            vec![o].into(),
            vals,
        ))
    }

    /// Extracts element `index` of a rank-1 array as a scalar.
    pub fn select(&self, a: &DiffArray, index: usize) -> Result<DiffArray> {
        if a.shape().len() != 1 {
            return Err(Error::shape("rank", 1, a.shape().len(), "select"));
        }
        if index >= a.len() {
            return Err(Error::arg(format!(
                "select index {index} out of range for length {}",
                a.len()
            )));
        }
        let ia = self.id_of(a);
        Ok(self.push(
            Op::Select { input: ia, index },
            vec![1].into(),
            vec![a.values()[index]],
        ))
    }

    /// Multiplies every element of `a` by a scalar node.
    pub fn scale_by(&self, a: &DiffArray, scalar: &DiffArray) -> Result<DiffArray> {
        if scalar.len() != 1 {
            return Err(Error::shape("scalar length", 1, scalar.len(), "scale_by"));
        }
        let s = scalar.item();
        let vals: Vec<f64> = a.values().iter().map(|&x| x * s).collect();
        let (ia, is) = (self.id_of(a), self.id_of(scalar));
        Ok(self.push(Op::ScaleBy { input: ia, scalar: is }, a.shape.clone(), vals))
    }

    // -- backward ----------------------------------------------------------

    /// Accumulates d(loss)/d(node) for every node reachable from `loss`.
    ///
    /// `loss` must be a scalar recorded on this tape. Leaves that do not
    /// influence the loss receive zero gradients.
    pub fn backward(&self, loss: &DiffArray) -> Result<Gradients> {
        let root = loss
            .node_id()
            .ok_or_else(|| Error::arg("backward: loss is not recorded on this tape".to_string()))?;
        if loss.len() != 1 {
            return Err(Error::shape("loss length", 1, loss.len(), "backward"));
        }
        let nodes = self.nodes.borrow();
        if root >= nodes.len() {
            return Err(Error::arg("backward: loss node id out of range".to_string()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, |d| add_assign(d, &g));
                    acc(&mut grads, &nodes, *b, |d| add_assign(d, &g));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *a, |d| add_assign(d, &g));
                    acc(&mut grads, &nodes, *b, |d| sub_assign(d, &g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.values_of(*a), self.values_of(*b));
                    acc(&mut grads, &nodes, *a, |d| mul_add_assign(d, &g, &vb));
                    acc(&mut grads, &nodes, *b, |d| mul_add_assign(d, &g, &va));
                }
                Op::Div(a, b) => {
                    let vb = self.values_of(*b);
                    let out = &node.values;
                    acc(&mut grads, &nodes, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] / vb[i];
                        }
                    });
                    acc(&mut grads, &nodes, *b, |d| {
                        for i in 0..d.len() {
                            d[i] -= g[i] * out[i] / vb[i];
                        }
                    });
                }
                Op::ScalarMul(a, c) => {
                    let c = *c;
                    acc(&mut grads, &nodes, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * c;
                        }
                    });
                }
                Op::ScalarAdd(a) => {
                    acc(&mut grads, &nodes, *a, |d| add_assign(d, &g));
                }
                Op::Sigmoid(a) => {
                    let y = &node.values;
                    acc(&mut grads, &nodes, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    });
                }
                Op::Relu(a) => {
                    let x = self.values_of(*a);
                    acc(&mut grads, &nodes, *a, |d| {
                        for i in 0..d.len() {
                            if x[i] > 0.0 {
                                d[i] += g[i];
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    acc(&mut grads, &nodes, *a, |d| {
                        for v in d.iter_mut() {
                            *v += g0;
                        }
                    });
                }
                Op::Mean(a) => {
                    let n = self.values_of(*a).len();
                    let g0 = g[0] / n as f64;
                    acc(&mut grads, &nodes, *a, |d| {
                        for v in d.iter_mut() {
                            *v += g0;
                        }
                    });
                }
                Op::Softmax { input, axis } => {
                    let y = &node.values;
                    let shape = &node.shape;
                    let lane = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    acc(&mut grads, &nodes, *input, |d| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * lane * inner + i;
                                let mut dot = 0.0;
                                for l in 0..lane {
                                    let idx = base + l * inner;
                                    dot += g[idx] * y[idx];
                                }
                                for l in 0..lane {
                                    let idx = base + l * inner;
                                    d[idx] += y[idx] * (g[idx] - dot);
                                }
                            }
                        }
                    });
                }
                Op::GlobalAvgPool(a) => {
                    let shape = self.shape_of(*a);
                    let (c, hw) = (shape[0], shape[1] * shape[2]);
                    acc(&mut grads, &nodes, *a, |d| {
                        for ci in 0..c {
                            let gc = g[ci] / hw as f64;
                            for v in d[ci * hw..(ci + 1) * hw].iter_mut() {
                                *v += gc;
                            }
                        }
                    });
                }
                Op::Upsample2(a) => {
                    let shape = self.shape_of(*a);
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let down = ops::upsample2_backward(&g, c, h, w);
                    acc(&mut grads, &nodes, *a, |d| add_assign(d, &down));
                }
                Op::ConcatChannels(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.values_of(p).len();
                        let slice = &g[offset..offset + n];
                        acc(&mut grads, &nodes, p, |d| add_assign(d, slice));
                        offset += n;
                    }
                }
                Op::Conv2d {
                    input,
                    weights,
                    bias,
                    stride,
                    padding,
                } => {
                    let in_shape = self.shape_of(*input);
                    let w_shape = self.shape_of(*weights);
                    let dims = ConvDims::new(
                        in_shape[0],
                        in_shape[1],
                        in_shape[2],
                        w_shape[0],
                        w_shape[2],
                        *stride,
                        *padding,
                    );
                    let (gi, gw, gb) = ops::conv2d_backward(
                        &self.values_of(*input),
                        &self.values_of(*weights),
                        &g,
                        &dims,
                    );
                    acc(&mut grads, &nodes, *input, |d| add_assign(d, &gi));
                    acc(&mut grads, &nodes, *weights, |d| add_assign(d, &gw));
                    acc(&mut grads, &nodes, *bias, |d| add_assign(d, &gb));
                }
                Op::Affine {
                    weights,
                    input,
                    bias,
                } => {
                    let wv = self.values_of(*weights);
                    let xv = self.values_of(*input);
                    let (o, i) = (g.len(), xv.len());
                    acc(&mut grads, &nodes, *weights, |d| {
                        for oo in 0..o {
                            for ii in 0..i {
                                d[oo * i + ii] += g[oo] * xv[ii];
                            }
                        }
                    });
                    acc(&mut grads, &nodes, *input, |d| {
                        for oo in 0..o {
                            for ii in 0..i {
                                d[ii] += g[oo] * wv[oo * i + ii];
                            }
                        }
                    });
                    acc(&mut grads, &nodes, *bias, |d| add_assign(d, &g));
                }
                Op::Select { input, index } => {
                    let (idx, g0) = (*index, g[0]);
                    acc(&mut grads, &nodes, *input, |d| d[idx] += g0);
                }
                Op::ScaleBy { input, scalar } => {
                    let s = self.values_of(*scalar)[0];
                    let x = self.values_of(*input);
                    acc(&mut grads, &nodes, *input, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * s;
                        }
                    });
                    let dot: f64 = g.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
                    acc(&mut grads, &nodes, *scalar, |d| d[0] += dot);
                }
            }
            grads[id] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gets or zero-initializes the gradient buffer for `id`, then updates it.
fn acc(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: NodeId,
    f: impl FnOnce(&mut Vec<f64>),
) {
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(vec![0.0; nodes[id].values.len()]);
    }
    f(slot.as_mut().expect("gradient slot just initialized"));
}

fn add_assign(d: &mut [f64], g: &[f64]) {
    for (x, &y) in d.iter_mut().zip(g) {
        *x += y;
    }
}

fn sub_assign(d: &mut [f64], g: &[f64]) {
    for (x, &y) in d.iter_mut().zip(g) {
        *x -= y;
    }
}

fn mul_add_assign(d: &mut [f64], g: &[f64], v: &[f64]) {
    for i in 0..d.len() {
        d[i] += g[i] * v[i];
    }
}

fn check_same_shape(a: &DiffArray, b: &DiffArray, context: &str) -> Result<()> {
    if a.shape() == b.shape() {
        return Ok(());
    }
    if a.shape().len() != b.shape().len() {
        return Err(Error::shape("rank", a.shape().len(), b.shape().len(), context));
    }
    for (i, (&l, &r)) in a.shape().iter().zip(b.shape()).enumerate() {
        if l != r {
            return Err(Error::shape(&format!("axis {i}"), l, r, context));
        }
    }
    unreachable!("shapes compare unequal but all axes match")
}

fn require_chw(a: &DiffArray, context: &str) -> Result<[usize; 3]> {
    let s = a.shape();
    if s.len() != 3 {
        return Err(Error::shape("rank", 3, s.len(), context));
    }
    Ok([s[0], s[1], s[2]])
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Result of one backward pass; gradients are queried per array handle.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Rc<[usize]>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `a`.
    ///
    /// Arrays that were never recorded, or that the loss does not depend
    /// on, get an all-zero gradient of matching shape.
    pub fn wrt(&self, a: &DiffArray) -> Tensor {
        match a.node_id() {
            Some(id) if id < self.grads.len() => {
                let shape = self.shapes[id].to_vec();
                match &self.grads[id] {
                    Some(g) => Tensor {
                        shape,
                        data: g.clone(),
                    },
                    None => Tensor::zeros(shape),
                }
            }
            _ => Tensor::zeros(a.shape().to_vec()),
        }
    }
}
