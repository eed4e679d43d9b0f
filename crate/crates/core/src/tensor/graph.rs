//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs were created earlier, so node
//! creation order is a topological order and `backward` simply walks the tape
//! in reverse.

use std::borrow::Cow;

use super::kernels::{self, gemm};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Keys dropout masks by `(seed, stream, step, site)`. `site` counts dropout
/// calls within one graph, so a fixed forward order gives fixed masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropoutContext {
    pub training: bool,
    pub seed: u64,
    pub stream: u64,
    pub step: u64,
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Dropout(NodeId, Vec<f64>),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad_left: usize,
        cols: Vec<f64>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    GatherRows {
        x: NodeId,
        index: Vec<usize>,
    },
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Mse(NodeId, NodeId),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grad_enabled: bool,
    dropout: DropoutContext,
    dropout_sites: u64,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    /// A recording graph: parameters added with [`Graph::param`] receive gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            dropout: DropoutContext::default(),
            dropout_sites: 0,
        }
    }

    /// A graph that never requires gradients and keeps dropout off.
    pub fn inference() -> Self {
        Graph { grad_enabled: false, ..Self::new() }
    }

    pub fn with_dropout(mut self, ctx: DropoutContext) -> Self {
        self.dropout = ctx;
        self
    }

    pub fn set_dropout(&mut self, ctx: DropoutContext) {
        self.dropout = ctx;
        self.dropout_sites = 0;
    }

    pub fn is_training(&self) -> bool {
        self.dropout.training
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.grad_enabled });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// Adds a tensor as a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Borrowed parameter leaf; avoids copying weights into every graph.
    pub fn param_ref(&mut self, t: &'a Tensor) -> NodeId {
        self.push_cow(Cow::Borrowed(t), Op::Leaf, true)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> NodeId {
        self.push_cow(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Copies a value into a fresh constant leaf, cutting gradient flow.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = kernels::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Adds a length-`q` bias to every row of a `p×q` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = kernels::add_bias(self.value(x), self.value(bias))?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(v, Op::AddBias(x, bias), rg))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = kernels::relu(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    /// Inverted dropout; identity unless the graph's dropout context is training.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        kernels::check_dropout_rate(rate)?;
        if !self.dropout.training || rate == 0.0 {
            return Ok(x);
        }
        let ctx = self.dropout;
        let key = kernels::dropout_key(ctx.seed, ctx.stream, ctx.step, self.dropout_sites);
        self.dropout_sites += 1;
        let mask = kernels::dropout_mask(self.value(x).numel(), rate, key);
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(v, Op::Dropout(x, mask), rg))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = kernels::softmax_rows(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(v, Op::SoftmaxRows(x), rg))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let (_, d) = xv.dims2()?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        kernels::check_norm_params(d, gv, bv, eps)?;
        let r = kernels::layer_norm_raw(xv.data(), d, gv.data(), bv.data(), eps)?;
        let v = Tensor::new(xv.shape().to_vec(), r.out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        let (xhat, inv_std) = if rg { (r.xhat, r.inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Length-preserving convolution with `pad_left` zeros before the sequence.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad_left: usize) -> Result<NodeId> {
        let (len, c_in, k, c_out) = kernels::check_conv(self.value(x), self.value(w), self.value(b))?;
        if pad_left >= k {
            return Err(Error::config(format!("left padding {pad_left} must be below kernel size {k}")));
        }
        let cols = kernels::im2col(self.value(x).data(), len, c_in, k, pad_left);
        let mut out = vec![0.0; len * c_out];
        gemm(len, k * c_in, c_out, &cols, false, self.value(w).data(), false, &mut out, false);
        let bias = self.value(b).data();
        for row in out.chunks_mut(c_out.max(1)) {
            for (v, bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let v = Tensor::new(vec![len, c_out], out)?;
        let rg = self.any_grad(&[x, w, b]);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(v, Op::Conv1d { x, w, b, pad_left, cols }, rg))
    }

    /// Symmetric zero padding; the kernel size must be odd.
    pub fn conv1d_same(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let k = self.value(w).shape().first().copied().unwrap_or(0);
        if k % 2 == 0 {
            return Err(Error::config(format!("same-padding conv needs an odd kernel, got {k}")));
        }
        self.conv1d(x, w, b, (k - 1) / 2)
    }

    /// Causal convolution: output row `t` sees input rows `t−k+1 ..= t`.
    pub fn conv1d_causal(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let k = self.value(w).shape().first().copied().unwrap_or(0);
        self.conv1d(x, w, b, k.saturating_sub(1))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2()?;
        if start + width > cols {
            return Err(Error::dim(format!(
                "column slice {start}..{} exceeds {cols} columns",
                start + width
            )));
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + width]);
        }
        let v = Tensor::new(vec![rows, width], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(v, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).dims2()?.0,
            None => return Err(Error::dim("concat_cols needs at least one input")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::dim(format!("concat_cols row counts differ: {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let v = Tensor::new(vec![rows, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// `out[t] = x[index[t]]`; gradients scatter-add back into the source rows.
    pub fn gather_rows(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2()?;
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::Bounds { index: i, len: rows });
            }
            data.extend_from_slice(&xv.data()[i * cols..(i + 1) * cols]);
        }
        let v = Tensor::new(vec![index.len(), cols], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(v, Op::GatherRows { x, index: index.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let v = Tensor::scalar(self.value(x).data().iter().sum::<f64>() / n as f64);
        let rg = self.any_grad(&[x]);
        Ok(self.push(v, Op::Mean(x), rg))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mse")?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = va.numel();
        if n == 0 {
            return Err(Error::dim("mse of empty tensors"));
        }
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n as f64), Op::Mse(a, b), rg))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for &(id, w) in terms {
            let t = if w == 1.0 { id } else { self.scale(id, w) };
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t)?,
            });
        }
        acc.ok_or_else(|| Error::dim("weighted_sum of no terms"))
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 || lv.shape().iter().any(|&d| d != 1) {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let gy = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &gy, &mut grads)?;
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match n.op {
                Op::Leaf if n.requires_grad => {
                    Some(g.unwrap_or_else(|| vec![0.0; n.value.numel()]))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node<'a>, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let n = self.nodes[id.0].value.numel();
            let g = grads[id.0].get_or_insert_with(|| vec![0.0; n]);
            f(g);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = val(*a).dims2()?;
                let (_, r) = val(*b).dims2()?;
                acc(*a, &mut |g| gemm(p, r, q, gy, false, val(*b).data(), true, g, true));
                acc(*b, &mut |g| gemm(q, p, r, val(*a).data(), true, gy, false, g, true));
            }
            Op::MatMulNt(a, b) => {
                // y = a·bᵀ: da = gy·b, db = gyᵀ·a
                let (p, q) = val(*a).dims2()?;
                let (r, _) = val(*b).dims2()?;
                acc(*a, &mut |g| gemm(p, r, q, gy, false, val(*b).data(), false, g, true));
                acc(*b, &mut |g| gemm(r, p, q, gy, true, val(*a).data(), false, g, true));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(g, y)| *g -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |g| {
                    for ((g, y), o) in g.iter_mut().zip(gy).zip(vb) {
                        *g += y * o;
                    }
                });
                acc(*b, &mut |g| {
                    for ((g, y), o) in g.iter_mut().zip(gy).zip(va) {
                        *g += y * o;
                    }
                });
            }
            Op::AddBias(x, b) => {
                let q = val(*b).numel();
                acc(*x, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| {
                    for row in gy.chunks(q.max(1)) {
                        add_into(g, row);
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(g, y)| *g += y * f)),
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |g| {
                    for ((g, y), v) in g.iter_mut().zip(gy).zip(xv) {
                        if *v > 0.0 {
                            *g += y;
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => {
                acc(*x, &mut |g| {
                    for ((g, y), m) in g.iter_mut().zip(gy).zip(mask) {
                        *g += y * m;
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let q = node.value.dims2()?.1.max(1);
                acc(*x, &mut |g| {
                    for ((gr, yr), gyr) in g.chunks_mut(q).zip(y.chunks(q)).zip(gy.chunks(q)) {
                        let dot: f64 = yr.iter().zip(gyr).map(|(a, b)| a * b).sum();
                        for ((g, yv), gv) in gr.iter_mut().zip(yr).zip(gyr) {
                            *g += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = val(*gamma).numel();
                let gam = val(*gamma).data();
                acc(*gamma, &mut |g| {
                    for (gyr, xr) in gy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            g[j] += gyr[j] * xr[j];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for gyr in gy.chunks(d) {
                        add_into(g, gyr);
                    }
                });
                if rg(*x) {
                    let df = d as f64;
                    acc(*x, &mut |g| {
                        for (r, ((gr, gyr), xr)) in
                            g.chunks_mut(d).zip(gy.chunks(d)).zip(xhat.chunks(d)).enumerate()
                        {
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for j in 0..d {
                                let dx = gyr[j] * gam[j];
                                sum_dxhat += dx;
                                sum_dxhat_xhat += dx * xr[j];
                            }
                            let s = inv_std[r] / df;
                            for j in 0..d {
                                let dx = gyr[j] * gam[j];
                                gr[j] += s * (df * dx - sum_dxhat - xr[j] * sum_dxhat_xhat);
                            }
                        }
                    });
                }
            }
            Op::Conv1d { x, w, b, pad_left, cols } => {
                let (len, c_in) = val(*x).dims2()?;
                let k = val(*w).shape()[0];
                let c_out = val(*b).numel();
                let width = k * c_in;
                acc(*w, &mut |g| gemm(width, len, c_out, cols, true, gy, false, g, true));
                acc(*b, &mut |g| {
                    for row in gy.chunks(c_out.max(1)) {
                        add_into(g, row);
                    }
                });
                if rg(*x) {
                    let mut dcols = vec![0.0; len * width];
                    gemm(len, c_out, width, gy, false, val(*w).data(), true, &mut dcols, false);
                    acc(*x, &mut |g| {
                        for t in 0..len {
                            for j in 0..k {
                                let src = t as isize + j as isize - *pad_left as isize;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let src = src as usize;
                                add_into(
                                    &mut g[src * c_in..(src + 1) * c_in],
                                    &dcols[t * width + j * c_in..t * width + (j + 1) * c_in],
                                );
                            }
                        }
                    });
                }
            }
            Op::SliceCols { x, start } => {
                let cols = val(*x).dims2()?.1;
                let width = node.value.dims2()?.1;
                acc(*x, &mut |g| {
                    for (r, gyr) in gy.chunks(width.max(1)).enumerate() {
                        add_into(&mut g[r * cols + start..r * cols + start + width], gyr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims2()?.1;
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).dims2()?.1;
                    acc(p, &mut |g| {
                        for (r, gr) in g.chunks_mut(w.max(1)).enumerate() {
                            add_into(gr, &gy[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::GatherRows { x, index } => {
                let cols = val(*x).dims2()?.1;
                acc(*x, &mut |g| {
                    for (t, &i) in index.iter().enumerate() {
                        add_into(&mut g[i * cols..(i + 1) * cols], &gy[t * cols..(t + 1) * cols]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gy)),
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += gy[0])),
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += gy[0] / n));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let c = 2.0 * gy[0] / va.len() as f64;
                acc(*a, &mut |g| {
                    for ((g, x), y) in g.iter_mut().zip(va).zip(vb) {
                        *g += c * (x - y);
                    }
                });
                acc(*b, &mut |g| {
                    for ((g, x), y) in g.iter_mut().zip(va).zip(vb) {
                        *g -= c * (x - y);
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of the leaves that required them, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<Tensor> {
        let g = self.grads.get(id.0)?.as_ref()?;
        Tensor::new(self.shapes[id.0].clone(), g.clone()).ok()
    }

    pub fn data(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0)?.as_deref()
    }
}
