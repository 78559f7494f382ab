//! Append-only computation tape with reverse-mode differentiation.
//!
//! Every op records its inputs and output value; inputs always precede the
//! node that consumes them, so node order is a topological order.

use std::collections::HashMap;

use super::conv::{self, ConvGeom};
use super::tensor::{gemm, Tensor};
use super::{NumericsError, Result};

/// Slope of the negative half of leaky-relu.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Offset inside the square root of [`Tape::row_norm`]; keeps the norm
/// differentiable at the origin.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Tensor),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    SliceCols { input: NodeId, start: usize, len: usize },
    PadCols { input: NodeId, start: usize, total: usize },
    BroadcastRows { input: NodeId, rows: usize },
    BroadcastCols { input: NodeId, cols: usize },
    BroadcastScalar { input: NodeId, shape: Vec<usize> },
    SumRows(NodeId),
    SumCols(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    LeakyRelu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Square(NodeId),
    RowNorm(NodeId),
    Recip(NodeId),
    // First-order only below this line.
    Log(NodeId),
    Abs(NodeId),
    Clamp { input: NodeId, lo: f64, hi: f64 },
    LogSigmoid(NodeId),
    LogSoftmaxRows(NodeId),
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId, geom: ConvGeom, cols: Vec<f64> },
    Upsample2x(NodeId),
    ConcatChannels(Vec<NodeId>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ConcatCols(_) => "concat",
            Op::SliceCols { .. } => "slice",
            Op::PadCols { .. } => "pad",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::BroadcastCols { .. } => "broadcast_cols",
            Op::BroadcastScalar { .. } => "broadcast_scalar",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Square(_) => "square",
            Op::RowNorm(_) => "l2_norm",
            Op::Recip(_) => "recip",
            Op::Log(_) => "log",
            Op::Abs(_) => "abs",
            Op::Clamp { .. } => "clamp",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::LogSoftmaxRows(_) => "log_softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(_) => "upsample2x",
            Op::ConcatChannels(_) => "concat_channels",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ConcatCols(v) | Op::ConcatChannels(v) => v.clone(),
            Op::Conv2d { input, weight, bias, .. } => vec![*input, *weight, *bias],
            Op::Transpose(a)
            | Op::MulConst(a, _)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::LeakyRelu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::RowNorm(a)
            | Op::Recip(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::LogSigmoid(a)
            | Op::LogSoftmaxRows(a)
            | Op::Upsample2x(a) => vec![*a],
            Op::SliceCols { input, .. }
            | Op::PadCols { input, .. }
            | Op::BroadcastRows { input, .. }
            | Op::BroadcastCols { input, .. }
            | Op::BroadcastScalar { input, .. }
            | Op::Clamp { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

fn mismatch(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub(crate) fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(NumericsError::UnknownNode(id.0))
        }
    }

    pub(crate) fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        self.push(Op::Transpose(a), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: NodeId, c: Tensor) -> Result<NodeId> {
        if self.shape(a) != c.shape() {
            return Err(mismatch("mul_const", format!("{:?} vs {:?}", self.shape(a), c.shape())));
        }
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(Op::MulConst(a, c), v)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * k);
        self.push(Op::Scale(a, k), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + k);
        self.push(Op::AddScalar(a, k), v)
    }

    /// Concatenate rank-2 tensors along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(mismatch("concat", "no inputs".into()));
        }
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(mismatch("concat", format!("row count {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::matrix(rows, total, out)?)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(a).dims2()?;
        if start + len > cols {
            return Err(mismatch("slice", format!("[{start}, {}) of {cols} columns", start + len)));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        self.push(Op::SliceCols { input: a, start, len }, Tensor::matrix(rows, len, out)?)
    }

    /// Embed `a` into a zero matrix with `total` columns starting at `start`.
    pub fn pad_cols(&mut self, a: NodeId, start: usize, total: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(a).dims2()?;
        if start + cols > total {
            return Err(mismatch("pad", format!("{cols} columns at {start} exceed {total}")));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; rows * total];
        for r in 0..rows {
            out[r * total + start..r * total + start + cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        self.push(Op::PadCols { input: a, start, total }, Tensor::matrix(rows, total, out)?)
    }

    /// Repeat a `[1, d]` row `rows` times.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        if r != 1 {
            return Err(mismatch("broadcast_rows", format!("expected one row, got {r}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(src);
        }
        self.push(Op::BroadcastRows { input: a, rows }, Tensor::matrix(rows, c, out)?)
    }

    /// Repeat a `[b, 1]` column `cols` times.
    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        if c != 1 {
            return Err(mismatch("broadcast_cols", format!("expected one column, got {c}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * cols);
        for &v in src {
            out.extend(std::iter::repeat_n(v, cols));
        }
        self.push(Op::BroadcastCols { input: a, cols }, Tensor::matrix(r, cols, out)?)
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.value(a).len() != 1 {
            return Err(mismatch("broadcast_scalar", format!("{:?} is not scalar", self.shape(a))));
        }
        let v = Tensor::filled(shape, self.value(a).item());
        self.push(Op::BroadcastScalar { input: a, shape: shape.to_vec() }, v)
    }

    /// Column sums, `[b, d] -> [1, d]`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += src[i * c + j];
            }
        }
        self.push(Op::SumRows(a), Tensor::matrix(1, c, out)?)
    }

    /// Row sums, `[b, d] -> [b, 1]`.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let out = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        self.push(Op::SumCols(a), Tensor::matrix(r, 1, out)?)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(mismatch("mean", "empty input".into()));
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), v)
    }

    pub fn leaky_relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { LEAKY_SLOPE * x });
        self.push(Op::LeakyRelu(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    /// Per-row Euclidean norm, `[b, d] -> [b, 1]`.
    pub fn row_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let out = (0..r)
            .map(|i| (src[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt())
            .collect();
        self.push(Op::RowNorm(a), Tensor::matrix(r, 1, out)?)
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), v)
    }

    /// Clamp into `[lo, hi]`; the subgradient is 1 inside the interval and 0 outside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp { input: a, lo, hi }, v)
    }

    /// `ln σ(x)`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(log_sigmoid);
        self.push(Op::LogSigmoid(a), v)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        self.push(Op::LogSoftmaxRows(a), Tensor::matrix(r, c, out)?)
    }

    /// "Same"-padded 2-D convolution of a `[c, h, w]` input with a square
    /// kernel. `weight` is `[out_c, c·k·k]`, `bias` is `[out_c, 1]`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(input).dims3()?;
        let (oc, rk) = self.value(weight).dims2()?;
        if rk != c * kernel * kernel {
            return Err(mismatch("conv2d", format!("weight {:?} for {c} input channels, kernel {kernel}", self.shape(weight))));
        }
        if self.shape(bias) != [oc, 1] {
            return Err(mismatch("conv2d", format!("bias {:?} for {oc} output channels", self.shape(bias))));
        }
        let geom = ConvGeom::same(c, h, w, oc, kernel, stride)?;
        let cols = conv::im2col(self.value(input).data(), &geom);
        let p = geom.out_h * geom.out_w;
        let mut out = vec![0.0; oc * p];
        let b = self.value(bias).data();
        for o in 0..oc {
            out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = b[o]);
        }
        gemm(oc, rk, p, self.value(weight).data(), false, &cols, false, &mut out, 1.0);
        let v = Tensor::new(&[oc, geom.out_h, geom.out_w], out)?;
        self.push(Op::Conv2d { input, weight, bias, geom, cols }, v)
    }

    /// Nearest-neighbour 2× upsampling of a `[c, h, w]` tensor.
    pub fn upsample2x(&mut self, a: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(a).dims3()?;
        let src = self.value(a).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[(ch * oh + y) * ow + x] = src[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        self.push(Op::Upsample2x(a), Tensor::new(&[c, oh, ow], out)?)
    }

    /// Stack `[c_i, h, w]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(mismatch("concat_channels", "no inputs".into()));
        }
        let (_, h, w) = self.value(parts[0]).dims3()?;
        let mut total = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.value(p).dims3()?;
            if (ph, pw) != (h, w) {
                return Err(mismatch("concat_channels", format!("{ph}x{pw} vs {h}x{w}")));
            }
            total += c;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Op::ConcatChannels(parts.to_vec()), Tensor::new(&[total, h, w], out)?)
    }

    /// Re-run every recorded op from the leaf values onto a fresh tape.
    pub fn replay(&self) -> Result<Tape> {
        let mut t = Tape::new();
        for node in &self.nodes {
            let id = match node.op.clone() {
                Op::Leaf => t.leaf(node.value.clone())?,
                Op::MatMul(a, b) => t.matmul(a, b)?,
                Op::Transpose(a) => t.transpose(a)?,
                Op::Add(a, b) => t.add(a, b)?,
                Op::Sub(a, b) => t.sub(a, b)?,
                Op::Mul(a, b) => t.mul(a, b)?,
                Op::MulConst(a, c) => t.mul_const(a, c)?,
                Op::Scale(a, k) => t.scale(a, k)?,
                Op::AddScalar(a, k) => t.add_scalar(a, k)?,
                Op::ConcatCols(p) => t.concat_cols(&p)?,
                Op::SliceCols { input, start, len } => t.slice_cols(input, start, len)?,
                Op::PadCols { input, start, total } => t.pad_cols(input, start, total)?,
                Op::BroadcastRows { input, rows } => t.broadcast_rows(input, rows)?,
                Op::BroadcastCols { input, cols } => t.broadcast_cols(input, cols)?,
                Op::BroadcastScalar { input, shape } => t.broadcast_scalar(input, &shape)?,
                Op::SumRows(a) => t.sum_rows(a)?,
                Op::SumCols(a) => t.sum_cols(a)?,
                Op::Sum(a) => t.sum(a)?,
                Op::Mean(a) => t.mean(a)?,
                Op::LeakyRelu(a) => t.leaky_relu(a)?,
                Op::Tanh(a) => t.tanh(a)?,
                Op::Sigmoid(a) => t.sigmoid(a)?,
                Op::Square(a) => t.square(a)?,
                Op::RowNorm(a) => t.row_norm(a)?,
                Op::Recip(a) => t.recip(a)?,
                Op::Log(a) => t.log(a)?,
                Op::Abs(a) => t.abs(a)?,
                Op::Clamp { input, lo, hi } => t.clamp(input, lo, hi)?,
                Op::LogSigmoid(a) => t.log_sigmoid(a)?,
                Op::LogSoftmaxRows(a) => t.log_softmax_rows(a)?,
                Op::Conv2d { input, weight, bias, geom, .. } => t.conv2d(input, weight, bias, geom.kernel, geom.stride)?,
                Op::Upsample2x(a) => t.upsample2x(a)?,
                Op::ConcatChannels(p) => t.concat_channels(&p)?,
            };
            debug_assert_eq!(id.0 + 1, t.nodes.len());
        }
        Ok(t)
    }

    /// `x·w + b` with `b` a `[1, out]` row broadcast over the batch.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        let rows = self.shape(xw)[0];
        let bb = self.broadcast_rows(b, rows)?;
        self.add(xw, bb)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Gradients keyed by the requested nodes.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    /// Remove and return the gradient for `id`.
    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.map.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Marks nodes that depend on any node in `wrt`.
pub(crate) fn dependency_mask(tape: &Tape, upto: usize, wrt: &[NodeId]) -> Vec<bool> {
    let mut needs = vec![false; upto + 1];
    for w in wrt {
        if w.0 <= upto {
            needs[w.0] = true;
        }
    }
    for i in 0..=upto {
        if !needs[i] && tape.nodes[i].op.inputs().iter().any(|p| needs[p.0]) {
            needs[i] = true;
        }
    }
    needs
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut adj[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Reverse-mode gradient of the scalar `output` with respect to each node in
/// `wrt`. Nodes that do not influence `output` receive a zero gradient.
pub fn backward(tape: &Tape, output: NodeId, wrt: &[NodeId]) -> Result<Gradients> {
    tape.check(output)?;
    for &w in wrt {
        tape.check(w)?;
    }
    if tape.value(output).len() != 1 {
        return Err(NumericsError::NonScalarOutput(tape.shape(output).to_vec()));
    }
    let needs = dependency_mask(tape, output.0, wrt);
    let wanted: std::collections::HashSet<NodeId> = wrt.iter().copied().collect();
    let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
    adj[output.0] = Some(Tensor::ones(tape.shape(output)));
    let mut grads = Gradients::default();

    for i in (0..=output.0).rev() {
        if !needs[i] {
            continue;
        }
        let Some(g) = adj[i].take() else { continue };
        let id = NodeId(i);
        vjp(tape, id, &g, &needs, &mut adj)?;
        if wanted.contains(&id) {
            grads.map.insert(id, g);
        }
    }
    for &w in wrt {
        grads.map.entry(w).or_insert_with(|| Tensor::zeros(tape.shape(w)));
    }
    Ok(grads)
}

fn vjp(tape: &Tape, id: NodeId, g: &Tensor, needs: &[bool], adj: &mut [Option<Tensor>]) -> Result<()> {
    let node = &tape.nodes[id.0];
    let y = &node.value;
    let want = |n: &NodeId| needs[n.0];
    let val = |n: NodeId| tape.value(n);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2()?;
            let n = val(*b).dims2()?.1;
            if want(a) {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, val(*b).data(), true, &mut da, 0.0);
                accumulate(adj, *a, Tensor::matrix(m, k, da)?);
            }
            if want(b) {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, val(*a).data(), true, g.data(), false, &mut db, 0.0);
                accumulate(adj, *b, Tensor::matrix(k, n, db)?);
            }
        }
        Op::Transpose(a) => accumulate(adj, *a, g.transpose()?),
        Op::Add(a, b) => {
            if want(a) {
                accumulate(adj, *a, g.clone());
            }
            if want(b) {
                accumulate(adj, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if want(a) {
                accumulate(adj, *a, g.clone());
            }
            if want(b) {
                accumulate(adj, *b, g.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if want(a) {
                accumulate(adj, *a, g.zip_map(val(*b), |x, y| x * y));
            }
            if want(b) {
                accumulate(adj, *b, g.zip_map(val(*a), |x, y| x * y));
            }
        }
        Op::MulConst(a, c) => accumulate(adj, *a, g.zip_map(c, |x, y| x * y)),
        Op::Scale(a, k) => accumulate(adj, *a, g.map(|v| v * k)),
        Op::AddScalar(a, _) => accumulate(adj, *a, g.clone()),
        Op::ConcatCols(parts) => {
            let (rows, total) = g.dims2()?;
            let mut offset = 0;
            for p in parts {
                let w = val(*p).dims2()?.1;
                if want(p) {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(adj, *p, Tensor::matrix(rows, w, d)?);
                }
                offset += w;
            }
        }
        Op::SliceCols { input, start, len } => {
            let (rows, cols) = val(*input).dims2()?;
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                d[r * cols + start..r * cols + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            accumulate(adj, *input, Tensor::matrix(rows, cols, d)?);
        }
        Op::PadCols { input, start, total } => {
            let (rows, cols) = val(*input).dims2()?;
            let mut d = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                d.extend_from_slice(&g.data()[r * total + start..r * total + start + cols]);
            }
            accumulate(adj, *input, Tensor::matrix(rows, cols, d)?);
        }
        Op::BroadcastRows { input, rows } => {
            let c = val(*input).len();
            let mut d = vec![0.0; c];
            for r in 0..*rows {
                for j in 0..c {
                    d[j] += g.data()[r * c + j];
                }
            }
            accumulate(adj, *input, Tensor::matrix(1, c, d)?);
        }
        Op::BroadcastCols { input, cols } => {
            let r = val(*input).len();
            let d = (0..r).map(|i| g.data()[i * cols..(i + 1) * cols].iter().sum()).collect();
            accumulate(adj, *input, Tensor::matrix(r, 1, d)?);
        }
        Op::BroadcastScalar { input, .. } => {
            accumulate(adj, *input, Tensor::new(val(*input).shape(), vec![g.sum()])?)
        }
        Op::SumRows(a) => {
            let (r, c) = val(*a).dims2()?;
            let mut d = Vec::with_capacity(r * c);
            for _ in 0..r {
                d.extend_from_slice(g.data());
            }
            accumulate(adj, *a, Tensor::matrix(r, c, d)?);
        }
        Op::SumCols(a) => {
            let (r, c) = val(*a).dims2()?;
            let mut d = Vec::with_capacity(r * c);
            for &v in g.data() {
                d.extend(std::iter::repeat_n(v, c));
            }
            accumulate(adj, *a, Tensor::matrix(r, c, d)?);
        }
        Op::Sum(a) => accumulate(adj, *a, Tensor::filled(val(*a).shape(), g.item())),
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            accumulate(adj, *a, Tensor::filled(val(*a).shape(), g.item() / n))
        }
        Op::LeakyRelu(a) => {
            accumulate(adj, *a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { LEAKY_SLOPE * gv }))
        }
        Op::Tanh(a) => accumulate(adj, *a, g.zip_map(y, |gv, t| gv * (1.0 - t * t))),
        Op::Sigmoid(a) => accumulate(adj, *a, g.zip_map(y, |gv, s| gv * s * (1.0 - s))),
        Op::Square(a) => accumulate(adj, *a, g.zip_map(val(*a), |gv, x| 2.0 * gv * x)),
        Op::RowNorm(a) => {
            let (r, c) = val(*a).dims2()?;
            let x = val(*a).data();
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let k = g.data()[i] / y.data()[i];
                for j in 0..c {
                    d[i * c + j] = k * x[i * c + j];
                }
            }
            accumulate(adj, *a, Tensor::matrix(r, c, d)?);
        }
        Op::Recip(a) => accumulate(adj, *a, g.zip_map(y, |gv, r| -gv * r * r)),
        Op::Log(a) => accumulate(adj, *a, g.zip_map(val(*a), |gv, x| gv / x)),
        Op::Abs(a) => accumulate(adj, *a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else if x < 0.0 { -gv } else { 0.0 })),
        Op::Clamp { input, lo, hi } => accumulate(
            adj,
            *input,
            g.zip_map(val(*input), |gv, x| if x >= *lo && x <= *hi { gv } else { 0.0 }),
        ),
        Op::LogSigmoid(a) => accumulate(adj, *a, g.zip_map(val(*a), |gv, x| gv * sigmoid(-x))),
        Op::LogSoftmaxRows(a) => {
            let (r, c) = y.dims2()?;
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let gs: f64 = g.data()[i * c..(i + 1) * c].iter().sum();
                for j in 0..c {
                    d[i * c + j] = g.data()[i * c + j] - y.data()[i * c + j].exp() * gs;
                }
            }
            accumulate(adj, *a, Tensor::matrix(r, c, d)?);
        }
        Op::Conv2d { input, weight, bias, geom, cols } => {
            let p = geom.out_h * geom.out_w;
            let rk = geom.in_c * geom.kernel * geom.kernel;
            if want(weight) {
                let mut dw = vec![0.0; geom.out_c * rk];
                gemm(geom.out_c, p, rk, g.data(), false, cols, true, &mut dw, 0.0);
                accumulate(adj, *weight, Tensor::matrix(geom.out_c, rk, dw)?);
            }
            if want(bias) {
                let db = (0..geom.out_c).map(|o| g.data()[o * p..(o + 1) * p].iter().sum()).collect();
                accumulate(adj, *bias, Tensor::matrix(geom.out_c, 1, db)?);
            }
            if want(input) {
                let mut dcols = vec![0.0; rk * p];
                gemm(rk, geom.out_c, p, val(*weight).data(), true, g.data(), false, &mut dcols, 0.0);
                let dx = conv::col2im(&dcols, geom);
                accumulate(adj, *input, Tensor::new(&[geom.in_c, geom.in_h, geom.in_w], dx)?);
            }
        }
        Op::Upsample2x(a) => {
            let (c, h, w) = val(*a).dims3()?;
            let (oh, ow) = (2 * h, 2 * w);
            let mut d = vec![0.0; c * h * w];
            for ch in 0..c {
                for yy in 0..oh {
                    for xx in 0..ow {
                        d[(ch * h + yy / 2) * w + xx / 2] += g.data()[(ch * oh + yy) * ow + xx];
                    }
                }
            }
            accumulate(adj, *a, Tensor::new(&[c, h, w], d)?);
        }
        Op::ConcatChannels(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(*p).len();
                if want(p) {
                    accumulate(adj, *p, Tensor::new(val(*p).shape(), g.data()[offset..offset + n].to_vec())?);
                }
                offset += n;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0)).unwrap();
        let y = t.square(x).unwrap();
        let g = backward(&t, y, &[x]).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn product_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0)).unwrap();
        let y = t.leaf(Tensor::scalar(5.0)).unwrap();
        let p = t.mul(x, y).unwrap();
        let g = backward(&t, p, &[x, y]).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 5.0);
        assert_eq!(g.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.5)).unwrap();
        let a = t.scale(x, 2.0).unwrap();
        let b = t.add(a, x).unwrap();
        let g = backward(&t, b, &[x]).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 3.0);
    }

    #[test]
    fn rejects_non_scalar_output_and_unknown_nodes() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0])).unwrap();
        assert!(matches!(backward(&t, x, &[x]), Err(NumericsError::NonScalarOutput(_))));
        let s = t.sum(x).unwrap();
        assert!(matches!(backward(&t, s, &[NodeId(99)]), Err(NumericsError::UnknownNode(99))));
    }

    #[test]
    fn unrelated_leaf_gets_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0])).unwrap();
        let z = t.leaf(Tensor::row(&[4.0])).unwrap();
        let s = t.sum(x).unwrap();
        let g = backward(&t, s, &[z]).unwrap();
        assert_eq!(g.get(z).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_finite_trips_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0)).unwrap();
        assert!(matches!(t.log(x), Err(NumericsError::NonFinite { op: "log" })));
        assert!(t.leaf(Tensor::scalar(f64::NAN)).is_err());
    }

    #[test]
    fn replay_reproduces_values() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.25]).unwrap()).unwrap();
        let w = t.leaf(Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap()).unwrap();
        let h = t.matmul(x, w).unwrap();
        let h = t.tanh(h).unwrap();
        let n = t.row_norm(h).unwrap();
        let s = t.log_softmax_rows(h).unwrap();
        let a = t.mean(n).unwrap();
        let b = t.sum(s).unwrap();
        let _ = t.add(a, b).unwrap();
        let r = t.replay().unwrap();
        for (p, q) in t.nodes.iter().zip(&r.nodes) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
    }
}
