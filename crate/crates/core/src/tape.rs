//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every differentiable computation in the model (fusion, encoder, decoders,
//! losses) is expressed as tape ops. The forward pass records, `backward`
//! replays in reverse and accumulates vector-Jacobian products. One tape per
//! training step; replay order is fixed, so gradients are deterministic.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out = a @ b, a: [m,k], b: [k,n]
    Matmul { a: NodeId, b: NodeId },
    /// out = a + b, same shape
    Add { a: NodeId, b: NodeId },
    /// out[i,j] = a[i,j] + row[j]
    AddRow { a: NodeId, row: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// Elementwise product, same shape
    Mul { a: NodeId, b: NodeId },
    /// out = c * a
    Scale { a: NodeId, c: f64 },
    /// Scalar sum of all elements
    Sum { a: NodeId },
    /// 2-D transpose
    Transpose { a: NodeId },
    /// Same data, new shape
    Reshape { a: NodeId },
    /// Max-subtracted softmax along `axis`
    Softmax { a: NodeId, axis: usize },
    /// Log-softmax along the last axis
    LogSoftmax { a: NodeId },
    /// Per-row normalization over the last axis, then affine
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Sigmoid { a: NodeId },
    /// x * sigmoid(x)
    Swish { a: NodeId },
    /// Columns [start, start+len) of a 2-D tensor
    SliceCols { a: NodeId, start: usize, len: usize },
    /// Rows [start, start+len) of a 2-D tensor
    SliceRows { a: NodeId, start: usize, len: usize },
    /// Horizontal concatenation of 2-D tensors with equal row counts
    ConcatCols { parts: Vec<NodeId> },
    /// out[i] = a[indices[i]]; scatter-add backward
    GatherRows { a: NodeId, indices: Vec<usize> },
    /// x: [Cin,H,W], w: [Cout,Cin,kh,kw], bias: [Cout]
    Conv2d { x: NodeId, w: NodeId, bias: NodeId, stride: (usize, usize), pad: (usize, usize) },
    /// x: [L,d], w: [d,k], bias: [d]; independent 1-D conv per channel
    DepthwiseConv1d { x: NodeId, w: NodeId, bias: NodeId, pad: usize },
    /// [C,H,W] -> [H, C*W]
    MergeChannels { x: NodeId },
    /// -log p(labels | log_probs) via the forward-backward recursion.
    /// `aug` is the blank-interleaved label sequence.
    CtcLoss { log_probs: NodeId, aug: Vec<usize>, blank: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records ops during the forward pass; replays them in reverse for gradients.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    /// Register an input tensor. Gradients flow to it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Untracked constant (masks, positional encodings, target distributions).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id].as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// True when every recorded value and every populated gradient is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.all_finite())
            && self.grads.iter().flatten().all(|g| g.all_finite())
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.ndim() != 2 || vb.ndim() != 2 {
            return Err(Error::Shape(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        let (da, db) = (va.data(), vb.data());
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b }, req))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let shape = va.shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, req))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (&self.nodes[a].value, &self.nodes[row].value);
        if va.ndim() != 2 || vr.numel() != va.cols() {
            return Err(Error::Shape(format!(
                "add_row: {:?} + row {:?}",
                va.shape(),
                vr.shape()
            )));
        }
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vr.data()[i % cols])
            .collect();
        let shape = va.shape().to_vec();
        let req = self.requires(a) || self.requires(row);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow { a, row }, req))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "sub shapes differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let shape = va.shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub { a, b }, req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let shape = va.shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, req))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|x| c * x).collect();
        let shape = va.shape().to_vec();
        let req = self.requires(a);
        self.push(Tensor::new(shape, data).unwrap(), Op::Scale { a, c }, req)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.data().iter().sum();
        let req = self.requires(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, req)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        if va.ndim() != 2 {
            return Err(Error::Shape(format!("transpose needs 2-D, got {:?}", va.shape())));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = va.data()[i * c + j];
            }
        }
        let req = self.requires(a);
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose { a }, req))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        let n: usize = shape.iter().product();
        if n != va.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} to {:?} changes element count",
                va.shape(),
                shape
            )));
        }
        let data = va.data().to_vec();
        let req = self.requires(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape { a }, req))
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        if axis >= va.ndim() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for shape {:?}",
                va.shape()
            )));
        }
        if !va.all_finite() {
            return Err(Error::Numeric("softmax input contains NaN/Inf".into()));
        }
        let data = softmax_forward(va.data(), va.shape(), axis);
        let shape = va.shape().to_vec();
        let req = self.requires(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax { a, axis }, req))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        if !va.all_finite() {
            return Err(Error::Numeric("log_softmax input contains NaN/Inf".into()));
        }
        let cols = va.cols();
        let rows = va.numel() / cols;
        let mut data = vec![0.0; va.numel()];
        for r in 0..rows {
            let x = &va.data()[r * cols..(r + 1) * cols];
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..cols {
                data[r * cols + j] = x[j] - lse;
            }
        }
        let shape = va.shape().to_vec();
        let req = self.requires(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::LogSoftmax { a }, req))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (vx, vg, vb) = (&self.nodes[x].value, &self.nodes[gain].value, &self.nodes[bias].value);
        let d = vx.cols();
        if d < 1 || vg.numel() != d || vb.numel() != d {
            return Err(Error::Shape(format!(
                "layer_norm: x {:?}, gain {:?}, bias {:?}",
                vx.shape(),
                vg.shape(),
                vb.shape()
            )));
        }
        let rows = vx.numel() / d;
        let mut data = vec![0.0; vx.numel()];
        for r in 0..rows {
            let xs = &vx.data()[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (xs[j] - mean) * istd * vg.data()[j] + vb.data()[j];
            }
        }
        let shape = vx.shape().to_vec();
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::LayerNorm { x, gain, bias, eps }, req))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|&x| sigmoid(x)).collect();
        let shape = va.shape().to_vec();
        let req = self.requires(a);
        self.push(Tensor::new(shape, data).unwrap(), Op::Sigmoid { a }, req)
    }

    pub fn swish(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let data = va.data().iter().map(|&x| x * sigmoid(x)).collect();
        let shape = va.shape().to_vec();
        let req = self.requires(a);
        self.push(Tensor::new(shape, data).unwrap(), Op::Swish { a }, req)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        if va.ndim() != 2 || start + len > va.cols() {
            return Err(Error::Shape(format!(
                "slice_cols [{start}, {}) of {:?}",
                start + len,
                va.shape()
            )));
        }
        let (rows, cols) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * cols + start..r * cols + start + len]);
        }
        let req = self.requires(a);
        Ok(self.push(Tensor::new(vec![rows, len], data)?, Op::SliceCols { a, start, len }, req))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        if va.ndim() != 2 || start + len > va.rows() {
            return Err(Error::Shape(format!(
                "slice_rows [{start}, {}) of {:?}",
                start + len,
                va.shape()
            )));
        }
        let cols = va.cols();
        let data = va.data()[start * cols..(start + len) * cols].to_vec();
        let req = self.requires(a);
        Ok(self.push(Tensor::new(vec![len, cols], data)?, Op::SliceRows { a, start, len }, req))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero parts".into()));
        }
        let rows = self.nodes[parts[0]].value.rows();
        if parts.iter().any(|&p| self.nodes[p].value.ndim() != 2 || self.nodes[p].value.rows() != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = &self.nodes[p].value;
                let c = v.cols();
                data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols { parts: parts.to_vec() },
            req,
        ))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let va = &self.nodes[a].value;
        if va.ndim() != 2 {
            return Err(Error::Shape(format!("gather_rows needs 2-D, got {:?}", va.shape())));
        }
        if indices.is_empty() {
            return Err(Error::Shape("gather_rows with no indices".into()));
        }
        let (rows, cols) = (va.rows(), va.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("gather_rows index {bad} out of {rows} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&va.data()[i * cols..(i + 1) * cols]);
        }
        let req = self.requires(a);
        Ok(self.push(
            Tensor::new(vec![indices.len(), cols], data)?,
            Op::GatherRows { a, indices: indices.to_vec() },
            req,
        ))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<NodeId> {
        let (vx, vw, vb) = (&self.nodes[x].value, &self.nodes[w].value, &self.nodes[bias].value);
        if vx.ndim() != 3 || vw.ndim() != 4 {
            return Err(Error::Shape(format!(
                "conv2d: x {:?} (want [C,H,W]), w {:?} (want [Co,Ci,kh,kw])",
                vx.shape(),
                vw.shape()
            )));
        }
        let (cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (cout, cin2, kh, kw) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
        if cin != cin2 || vb.numel() != cout {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: x {:?}, w {:?}, bias {:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            )));
        }
        if h + 2 * pad.0 < kh || wd + 2 * pad.1 < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad.0,
                wd + 2 * pad.1
            )));
        }
        let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let wo = (wd + 2 * pad.1 - kw) / stride.1 + 1;
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = vb.data()[co];
                    for ci in 0..cin {
                        for i in 0..kh {
                            let ih = oh * stride.0 + i;
                            if ih < pad.0 || ih - pad.0 >= h {
                                continue;
                            }
                            for j in 0..kw {
                                let iw = ow * stride.1 + j;
                                if iw < pad.1 || iw - pad.1 >= wd {
                                    continue;
                                }
                                acc += vx.data()[(ci * h + (ih - pad.0)) * wd + (iw - pad.1)]
                                    * vw.data()[((co * cin + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[(co * ho + oh) * wo + ow] = acc;
                }
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(bias);
        Ok(self.push(
            Tensor::new(vec![cout, ho, wo], out)?,
            Op::Conv2d { x, w, bias, stride, pad },
            req,
        ))
    }

    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId, bias: NodeId, pad: usize) -> Result<NodeId> {
        let (vx, vw, vb) = (&self.nodes[x].value, &self.nodes[w].value, &self.nodes[bias].value);
        if vx.ndim() != 2 || vw.ndim() != 2 {
            return Err(Error::Shape(format!(
                "depthwise_conv1d: x {:?} (want [L,d]), w {:?} (want [d,k])",
                vx.shape(),
                vw.shape()
            )));
        }
        let (l, d) = (vx.rows(), vx.cols());
        let (d2, k) = (vw.rows(), vw.cols());
        if d != d2 || vb.numel() != d {
            return Err(Error::Shape(format!(
                "depthwise_conv1d channel mismatch: x {:?}, w {:?}, bias {:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            )));
        }
        if l + 2 * pad < k {
            return Err(Error::Shape(format!(
                "depthwise_conv1d kernel {k} larger than padded length {}",
                l + 2 * pad
            )));
        }
        let lo = l + 2 * pad - k + 1;
        let mut out = vec![0.0; lo * d];
        for t in 0..lo {
            for c in 0..d {
                let mut acc = vb.data()[c];
                for i in 0..k {
                    let it = t + i;
                    if it < pad || it - pad >= l {
                        continue;
                    }
                    acc += vx.data()[(it - pad) * d + c] * vw.data()[c * k + i];
                }
                out[t * d + c] = acc;
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(bias);
        Ok(self.push(
            Tensor::new(vec![lo, d], out)?,
            Op::DepthwiseConv1d { x, w, bias, pad },
            req,
        ))
    }

    pub fn merge_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.nodes[x].value;
        if vx.ndim() != 3 {
            return Err(Error::Shape(format!("merge_channels needs 3-D, got {:?}", vx.shape())));
        }
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let mut data = vec![0.0; c * h * w];
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    data[hi * (c * w) + ci * w + wi] = vx.data()[(ci * h + hi) * w + wi];
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(Tensor::new(vec![h, c * w], data)?, Op::MergeChannels { x }, req))
    }

    /// CTC negative log-likelihood of `labels` (blank-free) given per-frame
    /// log posteriors. Fails when the blank-interleaved sequence is longer
    /// than the frame count.
    pub fn ctc_loss(&mut self, log_probs: NodeId, labels: &[usize], blank: usize) -> Result<NodeId> {
        let lp = &self.nodes[log_probs].value;
        if lp.ndim() != 2 {
            return Err(Error::Shape(format!("ctc_loss needs [T,V] log-probs, got {:?}", lp.shape())));
        }
        let (t_len, vocab) = (lp.rows(), lp.cols());
        if labels.iter().any(|&l| l >= vocab || l == blank) {
            return Err(Error::Input("ctc_loss: label id out of vocabulary or equal to blank".into()));
        }
        // A label sequence fits in T frames iff T >= |y| + adjacent repeats:
        // every label consumes a frame and each repeat needs a separating blank.
        let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
        if labels.len() + repeats > t_len {
            return Err(Error::Length(format!(
                "label sequence needs {} frames but only {} are available",
                labels.len() + repeats,
                t_len
            )));
        }
        let aug = interleave_blanks(labels, blank);
        let alpha = ctc_alpha(lp.data(), t_len, vocab, &aug, blank);
        let s = aug.len();
        let log_p = if s >= 2 {
            log_add(alpha[(t_len - 1) * s + s - 1], alpha[(t_len - 1) * s + s - 2])
        } else {
            alpha[(t_len - 1) * s + s - 1]
        };
        let req = self.requires(log_probs);
        Ok(self.push(
            Tensor::scalar(-log_p),
            Op::CtcLoss { log_probs, aug, blank },
            req,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse replay from a scalar loss. Accumulates into existing grads,
    /// so calling twice without reset doubles them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::Config(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut local: Vec<Option<Tensor>> = vec![None; n];
        local[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            if local[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = local[id].take().unwrap();
            let op = self.nodes[id].op.clone();
            self.backward_op(id, &op, &g, &mut local);
            // keep the upstream gradient for accumulation below
            local[id] = Some(g);
        }

        for (id, g) in local.into_iter().enumerate() {
            if let Some(g) = g {
                if !self.nodes[id].requires_grad {
                    continue;
                }
                match &mut self.grads[id] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => self.grads[id] = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_op(&self, out: NodeId, op: &Op, g: &Tensor, local: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.requires(a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g.data()[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gv * vb.data()[p * n + j];
                            }
                        }
                    }
                    accumulate(local, a, &Tensor::new(vec![m, k], da).unwrap(), self);
                }
                if self.requires(b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = va.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * g.data()[i * n + j];
                            }
                        }
                    }
                    accumulate(local, b, &Tensor::new(vec![k, n], db).unwrap(), self);
                }
            }
            Op::Add { a, b } => {
                accumulate(local, a, g, self);
                accumulate(local, b, g, self);
            }
            Op::AddRow { a, row } => {
                accumulate(local, a, g, self);
                if self.requires(row) {
                    let cols = self.nodes[row].value.numel();
                    let mut dr = vec![0.0; cols];
                    for (i, gv) in g.data().iter().enumerate() {
                        dr[i % cols] += gv;
                    }
                    accumulate(local, row, &Tensor::new(vec![cols], dr).unwrap(), self);
                }
            }
            Op::Sub { a, b } => {
                accumulate(local, a, g, self);
                if self.requires(b) {
                    let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                    accumulate(local, b, &Tensor::new(g.shape().to_vec(), neg).unwrap(), self);
                }
            }
            Op::Mul { a, b } => {
                if self.requires(a) {
                    let vb = &self.nodes[b].value;
                    let da: Vec<f64> = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    accumulate(local, a, &Tensor::new(g.shape().to_vec(), da).unwrap(), self);
                }
                if self.requires(b) {
                    let va = &self.nodes[a].value;
                    let db: Vec<f64> = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    accumulate(local, b, &Tensor::new(g.shape().to_vec(), db).unwrap(), self);
                }
            }
            Op::Scale { a, c } => {
                if self.requires(a) {
                    let da: Vec<f64> = g.data().iter().map(|v| c * v).collect();
                    accumulate(local, a, &Tensor::new(g.shape().to_vec(), da).unwrap(), self);
                }
            }
            Op::Sum { a } => {
                if self.requires(a) {
                    let va = &self.nodes[a].value;
                    let da = Tensor::filled(va.shape().to_vec(), g.data()[0]);
                    accumulate(local, a, &da, self);
                }
            }
            Op::Transpose { a } => {
                if self.requires(a) {
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] = g.data()[i * c + j];
                        }
                    }
                    accumulate(local, a, &Tensor::new(vec![c, r], da).unwrap(), self);
                }
            }
            Op::Reshape { a } => {
                if self.requires(a) {
                    let shape = self.nodes[a].value.shape().to_vec();
                    let da = Tensor::new(shape, g.data().to_vec()).unwrap();
                    accumulate(local, a, &da, self);
                }
            }
            Op::Softmax { a, axis } => {
                if self.requires(a) {
                    let y = &self.nodes[out].value;
                    let shape = y.shape();
                    let n = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..axis].iter().product();
                    let mut da = vec![0.0; y.numel()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |i: usize| (o * n + i) * inner + ii;
                            let dot: f64 =
                                (0..n).map(|i| g.data()[at(i)] * y.data()[at(i)]).sum();
                            for i in 0..n {
                                let idx = at(i);
                                da[idx] = y.data()[idx] * (g.data()[idx] - dot);
                            }
                        }
                    }
                    accumulate(local, a, &Tensor::new(shape.to_vec(), da).unwrap(), self);
                }
            }
            Op::LogSoftmax { a } => {
                if self.requires(a) {
                    let y = &self.nodes[out].value;
                    let cols = y.cols();
                    let rows = y.numel() / cols;
                    let mut da = vec![0.0; y.numel()];
                    for r in 0..rows {
                        let gs = &g.data()[r * cols..(r + 1) * cols];
                        let gsum: f64 = gs.iter().sum();
                        for j in 0..cols {
                            let p = y.data()[r * cols + j].exp();
                            da[r * cols + j] = gs[j] - p * gsum;
                        }
                    }
                    accumulate(local, a, &Tensor::new(y.shape().to_vec(), da).unwrap(), self);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let vx = &self.nodes[x].value;
                let vg = &self.nodes[gain].value;
                let d = vx.cols();
                let rows = vx.numel() / d;
                let mut dx = vec![0.0; vx.numel()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let xs = &vx.data()[r * d..(r + 1) * d];
                    let gs = &g.data()[r * d..(r + 1) * d];
                    let mean = xs.iter().sum::<f64>() / d as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let istd = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * istd).collect();
                    let dxhat: Vec<f64> = gs.iter().zip(vg.data()).map(|(gv, gn)| gv * gn).collect();
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = istd * (dxhat[j] - m1 - xhat[j] * m2);
                        dgain[j] += gs[j] * xhat[j];
                        dbias[j] += gs[j];
                    }
                }
                if self.requires(x) {
                    accumulate(local, x, &Tensor::new(vx.shape().to_vec(), dx).unwrap(), self);
                }
                if self.requires(gain) {
                    accumulate(local, gain, &Tensor::new(vec![d], dgain).unwrap(), self);
                }
                if self.requires(bias) {
                    accumulate(local, bias, &Tensor::new(vec![d], dbias).unwrap(), self);
                }
            }
            Op::Sigmoid { a } => {
                if self.requires(a) {
                    let y = &self.nodes[out].value;
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect();
                    accumulate(local, a, &Tensor::new(y.shape().to_vec(), da).unwrap(), self);
                }
            }
            Op::Swish { a } => {
                if self.requires(a) {
                    let vx = &self.nodes[a].value;
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(vx.data())
                        .map(|(gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * (s + xv * s * (1.0 - s))
                        })
                        .collect();
                    accumulate(local, a, &Tensor::new(vx.shape().to_vec(), da).unwrap(), self);
                }
            }
            Op::SliceCols { a, start, len } => {
                if self.requires(a) {
                    let va = &self.nodes[a].value;
                    let (rows, cols) = (va.rows(), va.cols());
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for j in 0..len {
                            da[r * cols + start + j] = g.data()[r * len + j];
                        }
                    }
                    accumulate(local, a, &Tensor::new(vec![rows, cols], da).unwrap(), self);
                }
            }
            Op::SliceRows { a, start, len } => {
                if self.requires(a) {
                    let va = &self.nodes[a].value;
                    let (rows, cols) = (va.rows(), va.cols());
                    let mut da = vec![0.0; rows * cols];
                    da[start * cols..(start + len) * cols].copy_from_slice(g.data());
                    accumulate(local, a, &Tensor::new(vec![rows, cols], da).unwrap(), self);
                }
            }
            Op::ConcatCols { ref parts } => {
                let rows = g.shape()[0];
                let total = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.cols();
                    if self.requires(p) {
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(local, p, &Tensor::new(vec![rows, c], dp).unwrap(), self);
                    }
                    offset += c;
                }
            }
            Op::GatherRows { a, ref indices } => {
                if self.requires(a) {
                    let va = &self.nodes[a].value;
                    let (rows, cols) = (va.rows(), va.cols());
                    let mut da = vec![0.0; rows * cols];
                    for (i, &src) in indices.iter().enumerate() {
                        for j in 0..cols {
                            da[src * cols + j] += g.data()[i * cols + j];
                        }
                    }
                    accumulate(local, a, &Tensor::new(vec![rows, cols], da).unwrap(), self);
                }
            }
            Op::Conv2d { x, w, bias, stride, pad } => {
                let vx = &self.nodes[x].value;
                let vw = &self.nodes[w].value;
                let (cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let (cout, _, kh, kw) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
                let (ho, wo) = (g.shape()[1], g.shape()[2]);
                let mut dx = vec![0.0; vx.numel()];
                let mut dw = vec![0.0; vw.numel()];
                let mut db = vec![0.0; cout];
                for co in 0..cout {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let gv = g.data()[(co * ho + oh) * wo + ow];
                            if gv == 0.0 {
                                continue;
                            }
                            db[co] += gv;
                            for ci in 0..cin {
                                for i in 0..kh {
                                    let ih = oh * stride.0 + i;
                                    if ih < pad.0 || ih - pad.0 >= h {
                                        continue;
                                    }
                                    for j in 0..kw {
                                        let iw = ow * stride.1 + j;
                                        if iw < pad.1 || iw - pad.1 >= wd {
                                            continue;
                                        }
                                        let xi = (ci * h + (ih - pad.0)) * wd + (iw - pad.1);
                                        let wi = ((co * cin + ci) * kh + i) * kw + j;
                                        dx[xi] += gv * vw.data()[wi];
                                        dw[wi] += gv * vx.data()[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                if self.requires(x) {
                    accumulate(local, x, &Tensor::new(vx.shape().to_vec(), dx).unwrap(), self);
                }
                if self.requires(w) {
                    accumulate(local, w, &Tensor::new(vw.shape().to_vec(), dw).unwrap(), self);
                }
                if self.requires(bias) {
                    accumulate(local, bias, &Tensor::new(vec![cout], db).unwrap(), self);
                }
            }
            Op::DepthwiseConv1d { x, w, bias, pad } => {
                let vx = &self.nodes[x].value;
                let vw = &self.nodes[w].value;
                let (l, d) = (vx.rows(), vx.cols());
                let k = vw.cols();
                let lo = g.shape()[0];
                let mut dx = vec![0.0; vx.numel()];
                let mut dw = vec![0.0; vw.numel()];
                let mut db = vec![0.0; d];
                for t in 0..lo {
                    for c in 0..d {
                        let gv = g.data()[t * d + c];
                        if gv == 0.0 {
                            continue;
                        }
                        db[c] += gv;
                        for i in 0..k {
                            let it = t + i;
                            if it < pad || it - pad >= l {
                                continue;
                            }
                            dx[(it - pad) * d + c] += gv * vw.data()[c * k + i];
                            dw[c * k + i] += gv * vx.data()[(it - pad) * d + c];
                        }
                    }
                }
                if self.requires(x) {
                    accumulate(local, x, &Tensor::new(vx.shape().to_vec(), dx).unwrap(), self);
                }
                if self.requires(w) {
                    accumulate(local, w, &Tensor::new(vw.shape().to_vec(), dw).unwrap(), self);
                }
                if self.requires(bias) {
                    accumulate(local, bias, &Tensor::new(vec![d], db).unwrap(), self);
                }
            }
            Op::MergeChannels { x } => {
                if self.requires(x) {
                    let vx = &self.nodes[x].value;
                    let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                    let mut dx = vec![0.0; vx.numel()];
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                dx[(ci * h + hi) * w + wi] = g.data()[hi * (c * w) + ci * w + wi];
                            }
                        }
                    }
                    accumulate(local, x, &Tensor::new(vec![c, h, w], dx).unwrap(), self);
                }
            }
            Op::CtcLoss { log_probs, ref aug, blank } => {
                if self.requires(log_probs) {
                    let lp = &self.nodes[log_probs].value;
                    let (t_len, vocab) = (lp.rows(), lp.cols());
                    let s = aug.len();
                    let alpha = ctc_alpha(lp.data(), t_len, vocab, aug, blank);
                    let beta = ctc_beta(lp.data(), t_len, vocab, aug, blank);
                    let log_p = if s >= 2 {
                        log_add(alpha[(t_len - 1) * s + s - 1], alpha[(t_len - 1) * s + s - 2])
                    } else {
                        alpha[(t_len - 1) * s + s - 1]
                    };
                    let gv = g.data()[0];
                    let mut da = vec![0.0; t_len * vocab];
                    for t in 0..t_len {
                        for (si, &lab) in aug.iter().enumerate() {
                            let occ = alpha[t * s + si] + beta[t * s + si]
                                - lp.data()[t * vocab + lab]
                                - log_p;
                            if occ.is_finite() {
                                da[t * vocab + lab] -= gv * occ.exp();
                            }
                        }
                    }
                    accumulate(local, log_probs, &Tensor::new(vec![t_len, vocab], da).unwrap(), self);
                }
            }
        }
    }
}

fn accumulate(local: &mut [Option<Tensor>], id: NodeId, g: &Tensor, tape: &Tape) {
    if !tape.requires(id) {
        return;
    }
    match &mut local[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => local[id] = Some(g.clone()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_forward(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for ii in 0..inner {
            let at = |i: usize| (o * n + i) * inner + ii;
            let m = (0..n).map(|i| data[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for i in 0..n {
                denom += (data[at(i)] - m).exp();
            }
            for i in 0..n {
                out[at(i)] = (data[at(i)] - m).exp() / denom;
            }
        }
    }
    out
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub(crate) fn interleave_blanks(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut aug = Vec::with_capacity(2 * labels.len() + 1);
    aug.push(blank);
    for &l in labels {
        aug.push(l);
        aug.push(blank);
    }
    aug
}

/// Forward variables of the CTC recursion, log domain, [T x S], entries
/// include the emission at their own frame.
fn ctc_alpha(lp: &[f64], t_len: usize, vocab: usize, aug: &[usize], blank: usize) -> Vec<f64> {
    let s = aug.len();
    let mut alpha = vec![f64::NEG_INFINITY; t_len * s];
    alpha[0] = lp[aug[0]];
    if s > 1 {
        alpha[1] = lp[aug[1]];
    }
    for t in 1..t_len {
        for si in 0..s {
            let mut acc = alpha[(t - 1) * s + si];
            if si >= 1 {
                acc = log_add(acc, alpha[(t - 1) * s + si - 1]);
            }
            // the skip transition is illegal into a blank or a repeated label
            if si >= 2 && aug[si] != blank && aug[si] != aug[si - 2] {
                acc = log_add(acc, alpha[(t - 1) * s + si - 2]);
            }
            alpha[t * s + si] = acc + lp[t * vocab + aug[si]];
        }
    }
    alpha
}

/// Backward variables, symmetric to [`ctc_alpha`].
#[allow(clippy::needless_range_loop)]
fn ctc_beta(lp: &[f64], t_len: usize, vocab: usize, aug: &[usize], blank: usize) -> Vec<f64> {
    let s = aug.len();
    let mut beta = vec![f64::NEG_INFINITY; t_len * s];
    beta[(t_len - 1) * s + s - 1] = lp[(t_len - 1) * vocab + aug[s - 1]];
    if s > 1 {
        beta[(t_len - 1) * s + s - 2] = lp[(t_len - 1) * vocab + aug[s - 2]];
    }
    for t in (0..t_len - 1).rev() {
        for si in 0..s {
            let mut acc = beta[(t + 1) * s + si];
            if si + 1 < s {
                acc = log_add(acc, beta[(t + 1) * s + si + 1]);
            }
            if si + 2 < s && aug[si + 2] != blank && aug[si + 2] != aug[si] {
                acc = log_add(acc, beta[(t + 1) * s + si + 2]);
            }
            beta[t * s + si] = acc + lp[t * vocab + aug[si]];
        }
    }
    beta
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Central-difference gradient check. `build` must construct the same
    /// scalar loss from fresh leaves on every call.
    fn check_grads<F>(inputs: &[Tensor], build: F, h: f64, atol: f64, rtol: f64)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &ids);
        assert!(tape.value(loss).is_scalar(), "gradient check needs a scalar loss");
        tape.backward(loss).unwrap();

        let eval = |perturbed: &[Tensor]| -> f64 {
            let mut t2 = Tape::new();
            let ids2: Vec<NodeId> = perturbed.iter().map(|t| t2.leaf(t.clone(), true)).collect();
            let l = build(&mut t2, &ids2);
            t2.value(l).data()[0]
        };

        for (k, inp) in inputs.iter().enumerate() {
            let grad = tape.grad(ids[k]).expect("leaf gradient populated");
            for e in 0..inp.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = grad.data()[e];
                let err = (a - fd).abs();
                assert!(
                    err <= atol + rtol * a.abs().max(fd.abs()),
                    "input {k} elem {e}: analytic {a} vs fd {fd} (err {err})"
                );
            }
        }
    }

    /// Reduce a tensor node to a scalar through a fixed weighting so every
    /// output element influences the loss differently.
    fn weighted_sum(tape: &mut Tape, id: NodeId) -> NodeId {
        let v = tape.value(id);
        let w: Vec<f64> = (0..v.numel()).map(|i| 0.3 + 0.7 * (i as f64).sin()).collect();
        let wt = tape.constant(Tensor::new(v.shape().to_vec(), w).unwrap());
        let prod = tape.mul(id, wt).unwrap();
        tape.sum(prod)
    }

    #[test]
    fn matmul_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 2]);
        check_grads(
            &[a, b],
            |t, ids| {
                let m = t.matmul(ids[0], ids[1]).unwrap();
                weighted_sum(t, m)
            },
            1e-5,
            1e-8,
            1e-6,
        );
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = rand_tensor(&mut rng, vec![3, 5]);
        let b = rand_tensor(&mut rng, vec![3, 5]);
        let row = rand_tensor(&mut rng, vec![5]);
        check_grads(
            &[a, b, row],
            |t, ids| {
                let s = t.add(ids[0], ids[1]).unwrap();
                let d = t.sub(s, ids[1]).unwrap();
                let m = t.mul(d, ids[0]).unwrap();
                let r = t.add_row(m, ids[2]).unwrap();
                let sc = t.scale(r, 0.37);
                weighted_sum(t, sc)
            },
            1e-5,
            1e-8,
            1e-6,
        );
    }

    #[test]
    fn activations_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = rand_tensor(&mut rng, vec![4, 3]);
        check_grads(
            &[a],
            |t, ids| {
                let s = t.sigmoid(ids[0]);
                let w = t.swish(s);
                weighted_sum(t, w)
            },
            1e-5,
            1e-8,
            1e-6,
        );
    }

    #[test]
    fn softmax_grad_matches_finite_differences_on_both_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = rand_tensor(&mut rng, vec![2, 3, 4]);
        for axis in 0..3 {
            check_grads(
                &[a.clone()],
                |t, ids| {
                    let s = t.softmax(ids[0], axis).unwrap();
                    weighted_sum(t, s)
                },
                1e-5,
                1e-8,
                1e-6,
            );
        }
    }

    #[test]
    fn log_softmax_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = rand_tensor(&mut rng, vec![3, 6]);
        check_grads(
            &[a],
            |t, ids| {
                let s = t.log_softmax(ids[0]).unwrap();
                weighted_sum(t, s)
            },
            1e-5,
            1e-8,
            1e-6,
        );
    }

    #[test]
    fn layer_norm_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = rand_tensor(&mut rng, vec![3, 8]);
        let gain = rand_tensor(&mut rng, vec![8]);
        let bias = rand_tensor(&mut rng, vec![8]);
        check_grads(
            &[x, gain, bias],
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-12).unwrap();
                weighted_sum(t, y)
            },
            1e-5,
            1e-7,
            1e-5,
        );
    }

    #[test]
    fn reshaping_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = rand_tensor(&mut rng, vec![4, 6]);
        let b = rand_tensor(&mut rng, vec![4, 2]);
        check_grads(
            &[a, b],
            |t, ids| {
                let tr = t.transpose(ids[0]).unwrap(); // [6,4]
                let back = t.transpose(tr).unwrap(); // [4,6]
                let sc = t.slice_cols(back, 1, 3).unwrap(); // [4,3]
                let sr = t.slice_rows(sc, 1, 2).unwrap(); // [2,3]
                let gathered = t.gather_rows(ids[1], &[0, 2, 2, 3, 1]).unwrap(); // [5,2]
                let g2 = t.slice_rows(gathered, 0, 2).unwrap(); // [2,2]
                let cat = t.concat_cols(&[sr, g2]).unwrap(); // [2,5]
                weighted_sum(t, cat)
            },
            1e-5,
            1e-8,
            1e-6,
        );
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = rand_tensor(&mut rng, vec![2, 5, 4]);
        let w = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, vec![3]);
        check_grads(
            &[x, w, b],
            |t, ids| {
                let c = t.conv2d(ids[0], ids[1], ids[2], (2, 1), (1, 1)).unwrap();
                weighted_sum(t, c)
            },
            1e-5,
            1e-7,
            1e-5,
        );
    }

    #[test]
    fn depthwise_conv1d_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = rand_tensor(&mut rng, vec![6, 3]);
        let w = rand_tensor(&mut rng, vec![3, 5]);
        let b = rand_tensor(&mut rng, vec![3]);
        check_grads(
            &[x, w, b],
            |t, ids| {
                let c = t.depthwise_conv1d(ids[0], ids[1], ids[2], 2).unwrap();
                weighted_sum(t, c)
            },
            1e-5,
            1e-7,
            1e-5,
        );
    }

    #[test]
    fn merge_channels_matches_finite_differences_and_layout() {
        let x = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let mut tape = Tape::new();
        let id = tape.leaf(x.clone(), false);
        let m = tape.merge_channels(id).unwrap();
        // row h gathers [x[0,h,:], x[1,h,:]]
        assert_eq!(tape.value(m).shape(), &[2, 4]);
        assert_eq!(tape.value(m).data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);

        check_grads(
            &[x],
            |t, ids| {
                let m = t.merge_channels(ids[0]).unwrap();
                weighted_sum(t, m)
            },
            1e-5,
            1e-8,
            1e-6,
        );
    }

    #[test]
    fn ctc_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let logits = rand_tensor(&mut rng, vec![6, 4]);
        check_grads(
            &[logits],
            |t, ids| {
                let lp = t.log_softmax(ids[0]).unwrap();
                t.ctc_loss(lp, &[1, 2, 1], 0).unwrap()
            },
            1e-5,
            1e-7,
            1e-5,
        );
    }

    #[test]
    fn ctc_uniform_two_frame_example() {
        // Uniform p = 0.5 over {blank, a}, T = 2, labels = "a".
        // Valid alignments: (a,-), (-,a), (a,a); total probability 3/4.
        let lp = Tensor::filled(vec![2, 2], 0.5f64.ln());
        let mut tape = Tape::new();
        let id = tape.leaf(lp, false);
        let loss = tape.ctc_loss(id, &[1], 0).unwrap();
        assert!((tape.value(loss).data()[0] - (-0.75f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn ctc_rejects_labels_longer_than_frames() {
        let lp = Tensor::filled(vec![4, 3], 0.3f64.ln());
        let mut tape = Tape::new();
        let id = tape.leaf(lp, false);
        // five labels cannot fit in four frames
        match tape.ctc_loss(id, &[1, 2, 1, 2, 1], 0) {
            Err(Error::Length(_)) => {}
            other => panic!("expected length error, got {other:?}"),
        }
        // a repeat needs a separating blank: "aa" needs three frames
        let lp2 = Tensor::filled(vec![2, 3], 0.3f64.ln());
        let id2 = tape.leaf(lp2, false);
        match tape.ctc_loss(id2, &[1, 1], 0) {
            Err(Error::Length(_)) => {}
            other => panic!("expected length error, got {other:?}"),
        }
    }

    #[test]
    fn ctc_empty_label_is_all_blank_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let logits = rand_tensor(&mut rng, vec![5, 3]);
        let mut tape = Tape::new();
        let id = tape.leaf(logits, false);
        let lp = tape.log_softmax(id).unwrap();
        let loss = tape.ctc_loss(lp, &[], 0).unwrap();
        let want: f64 = -(0..5).map(|t| tape.value(lp).at2(t, 0)).sum::<f64>();
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn softmax_worked_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), false);
        let s = tape.softmax(a, 1).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let b = tape.leaf(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap(), false);
        let s2 = tape.softmax(b, 1).unwrap();
        assert!(tape.value(s2).all_finite());
        assert!((tape.value(s2).data()[0] - 1.0).abs() < 1e-12);

        let c = tape.leaf(
            Tensor::new(vec![1, 3], vec![1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()]).unwrap(),
            false,
        );
        let s3 = tape.softmax(c, 1).unwrap();
        let want = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (got, w) in tape.value(s3).data().iter().zip(want) {
            assert!((got - w).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan_input() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap(), false);
        match tape.softmax(a, 1) {
            Err(Error::Numeric(_)) => {}
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn layer_norm_output_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_tensor(&mut rng, vec![5, 64]);
        let mut tape = Tape::new();
        let xi = tape.leaf(x, false);
        let gain = tape.leaf(Tensor::filled(vec![64], 1.0), false);
        let bias = tape.leaf(Tensor::filled(vec![64], 0.0), false);
        let y = tape.layer_norm(xi, gain, bias, 1e-12).unwrap();
        for r in 0..5 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 64.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-9, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "row {r} var {var}");
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 7.0]).unwrap(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.5, -0.5, 2.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, -1.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        match tape.backward(x) {
            Err(Error::Config(_)) => {}
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let c = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::filled(vec![2, 3], 1.0), false);
        let b = tape.leaf(Tensor::filled(vec![3, 3], 1.0), false);
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(tape.matmul(a, a), Err(Error::Shape(_))));
        assert!(matches!(tape.slice_cols(a, 2, 2), Err(Error::Shape(_))));
        assert!(matches!(tape.gather_rows(a, &[5]), Err(Error::Shape(_))));
    }

    #[test]
    fn conv2d_output_shape_with_stride_two() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(vec![1, 5, 3], 1.0), false);
        let w = tape.leaf(Tensor::filled(vec![2, 1, 3, 3], 0.1), false);
        let b = tape.leaf(Tensor::filled(vec![2], 0.0), false);
        let c = tape.conv2d(x, w, b, (2, 1), (1, 1)).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3, 3]);
    }
}
