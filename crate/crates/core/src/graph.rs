//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op appends a node whose
//! inputs are earlier nodes, so node order is a topological order and the
//! backward sweep simply walks the node list in reverse.

use crate::attention::{self, WindowSpec};
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Reshape { x: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulConst { x: NodeId, factor: Tensor },
    Scale { x: NodeId, factor: f64 },
    Sum { x: NodeId },
    Mse { pred: NodeId, target: Tensor },
    Gelu { x: NodeId },
    SoftmaxRows { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: NodeId, kernel: NodeId, geo: ConvGeometry },
    ConvTranspose2d { x: NodeId, kernel: NodeId, geo: ConvGeometry },
    AvgPool { x: NodeId, k: usize },
    NearestUp { x: NodeId, k: usize },
    SliceChannels { x: NodeId, start: usize },
    ConcatChannels { parts: Vec<NodeId> },
    WindowAttention { q: NodeId, k: NodeId, v: NodeId, spec: WindowSpec, saved: attention::WindowCache },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of the registered parameters, in registration order.
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.entries.into_iter().map(|(_, t)| t).collect()
    }
}

/// Computation graph. Tracks the bytes it holds as an allocation proxy.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    bytes: usize,
    corrupt_gelu_backward: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Debug hook: makes the GELU backward rule wrong so gradient checks
    /// can be shown to fail.
    pub fn with_corrupted_gelu_backward() -> Self {
        Self {
            corrupt_gelu_backward: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by node values and saved activations.
    pub fn bytes_allocated(&self) -> usize {
        self.bytes
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.bytes += value.size_bytes() + saved_bytes(&op);
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.params.push((name.into(), id));
        id
    }

    /// Registers a non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// `a · b` where `b` is 2-D `[k, n]` and `a` is any tensor whose last axis is
    /// `k`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
        let data = ops::matmul(av.data(), bv.data(), m, k, n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(shape, data)?, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::dim("transpose", format!("expected a 2-D tensor, got {:?}", xv.shape())));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let out = transpose_data(xv.data(), r, c);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same("add", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Adds a `[last_dim]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.numel() != xv.last_dim() {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(bv.numel()) {
            ops::axpy(1.0, bv.data(), row);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias { x, bias }))
    }

    /// Elementwise product of two nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: NodeId, factor: Tensor) -> Result<NodeId> {
        let xv = self.value(x);
        check_same("mul_const", xv, &factor)?;
        let data = xv.data().iter().zip(factor.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst { x, factor }))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: NodeId, target: Tensor) -> Result<NodeId> {
        let pv = self.value(pred);
        check_same("mse", pv, &target)?;
        let total: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let loss = total / pv.numel() as f64;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * ops::normal_cdf(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu { x })
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            ops::softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::SoftmaxRows { x })
    }

    /// Normalizes each row over the last axis then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Cross-correlation of a `[H, W, C]` map with a `[k, k, C, C']` kernel.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let (h, w, c_in, k, c_out) = conv_dims("conv2d", xv, kv, false)?;
        let geo = ConvGeometry::conv(h, w, k, stride, padding).ok_or_else(|| {
            Error::dim(
                "conv2d",
                format!(
                    "kernel {k}x{k} (stride {stride}, padding {padding}) does not fit input {:?}",
                    xv.shape()
                ),
            )
        })?;
        let data = ops::conv2d_forward(xv.data(), kv.data(), &geo, c_in, c_out);
        let out = Tensor::new(vec![geo.out_h, geo.out_w, c_out], data)?;
        Ok(self.push(out, Op::Conv2d { x, kernel, geo }))
    }

    /// Transposed convolution of a `[h, w, C]` map with a `[k, k, C', C]`
    /// kernel; the exact adjoint of [`Graph::conv2d`] with the same kernel.
    pub fn conv_transpose2d(&mut self, x: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let (h, w, c_in, k, c_out) = conv_dims("conv_transpose2d", xv, kv, true)?;
        let geo = ConvGeometry::transpose(h, w, k, stride, padding).ok_or_else(|| {
            Error::dim("conv_transpose2d", format!("padding {padding} consumes the whole output"))
        })?;
        let data = ops::conv_transpose2d_forward(xv.data(), kv.data(), &geo, c_in, c_out);
        let out = Tensor::new(vec![geo.out_h, geo.out_w, c_out], data)?;
        Ok(self.push(out, Op::ConvTranspose2d { x, kernel, geo }))
    }

    /// `k×k` mean pooling with stride `k`.
    pub fn avg_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (h, w, c) = map_dims("avg_pool", xv)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::dim("avg_pool", format!("side {h}x{w} is not divisible by {k}")));
        }
        let data = ops::avg_pool(xv.data(), h, w, c, k);
        let out = Tensor::new(vec![h / k, w / k, c], data)?;
        Ok(self.push(out, Op::AvgPool { x, k }))
    }

    /// Nearest-neighbour replication by `k` along both spatial axes.
    pub fn upsample_nearest(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (h, w, c) = map_dims("upsample_nearest", xv)?;
        if k == 0 {
            return Err(Error::dim("upsample_nearest", "factor must be positive"));
        }
        let data = ops::nearest_upsample(xv.data(), h, w, c, k);
        let out = Tensor::new(vec![h * k, w * k, c], data)?;
        Ok(self.push(out, Op::NearestUp { x, k }))
    }

    /// Channels `start..start + len` of the last axis.
    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if len == 0 || start + len > c {
            return Err(Error::dim(
                "slice_channels",
                format!("range {start}..{} outside {c} channels", start + len),
            ));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceChannels { x, start }))
    }

    /// Concatenates along the last axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_channels", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total += s[s.len() - 1];
        }
        if parts.len() == 1 {
            let out = self.value(*first).clone();
            return Ok(self.push(out, Op::ConcatChannels { parts: parts.to_vec() }));
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                let c = v.last_dim();
                data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatChannels { parts: parts.to_vec() }))
    }

    /// Windowed softmax attention of per-head `[H, W, d_head]` query, key and
    /// value maps. See [`attention::windowed_attention`].
    pub fn window_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, spec: WindowSpec) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        check_same("window_attention", qv, kv)?;
        check_same("window_attention", qv, vv)?;
        let (h, w, _) = map_dims("window_attention", qv)?;
        spec.check_grid(h, w)?;
        let (out, saved) = attention::window_forward(qv, kv, vv, &spec);
        Ok(self.push(out, Op::WindowAttention { q, k, v, spec, saved }))
    }

    /// Reverse-mode sweep from a scalar `loss`. Every registered parameter gets
    /// a gradient, zero if it does not influence the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop(node, &g, &mut grads)?;
            // Leaves keep their gradient for collection below.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let entries = self
            .params
            .iter()
            .map(|(name, id)| {
                let g = grads
                    .get(id.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*id)));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { entries })
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.last_dim(), bv.shape()[1]);
                let ga = ops::matmul_grad_lhs(gd, bv.data(), m, k, n);
                let gb = ops::matmul_grad_rhs(av.data(), gd, m, k, n);
                accumulate(grads, *a, av.shape(), ga)?;
                accumulate(grads, *b, bv.shape(), gb)?;
            }
            Op::Transpose { x } => {
                let xv = self.value(*x);
                let (r, c) = (xv.shape()[0], xv.shape()[1]);
                accumulate(grads, *x, xv.shape(), transpose_data(gd, c, r))?;
            }
            Op::Reshape { x } => {
                accumulate(grads, *x, self.shape(*x), gd.to_vec())?;
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, self.shape(*a), gd.to_vec())?;
                accumulate(grads, *b, self.shape(*b), gd.to_vec())?;
            }
            Op::AddBias { x, bias } => {
                let d = self.value(*bias).numel();
                let mut gb = vec![0.0; d];
                for row in gd.chunks_exact(d) {
                    ops::axpy(1.0, row, &mut gb);
                }
                accumulate(grads, *x, self.shape(*x), gd.to_vec())?;
                accumulate(grads, *bias, self.shape(*bias), gb)?;
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                let gb = gd.iter().zip(av.data()).map(|(g, y)| g * y).collect();
                accumulate(grads, *a, av.shape(), ga)?;
                accumulate(grads, *b, bv.shape(), gb)?;
            }
            Op::MulConst { x, factor } => {
                let gx = gd.iter().zip(factor.data()).map(|(g, f)| g * f).collect();
                accumulate(grads, *x, self.shape(*x), gx)?;
            }
            Op::Scale { x, factor } => {
                let gx = gd.iter().map(|g| g * factor).collect();
                accumulate(grads, *x, self.shape(*x), gx)?;
            }
            Op::Sum { x } => {
                let xv = self.value(*x);
                accumulate(grads, *x, xv.shape(), vec![gd[0]; xv.numel()])?;
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let c = 2.0 * gd[0] / pv.numel() as f64;
                let gp = pv.data().iter().zip(target.data()).map(|(p, t)| c * (p - t)).collect();
                accumulate(grads, *pred, pv.shape(), gp)?;
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let fault = if self.corrupt_gelu_backward { 1.5 } else { 1.0 };
                let gx = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &v)| g * fault * (ops::normal_cdf(v) + v * ops::normal_pdf(v)))
                    .collect();
                accumulate(grads, *x, xv.shape(), gx)?;
            }
            Op::SoftmaxRows { x } => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((gy, yr), gxr) in gd.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let inner = ops::dot(gy, yr);
                    for ((o, &gv), &yv) in gxr.iter_mut().zip(gy).zip(yr) {
                        *o = yv * (gv - inner);
                    }
                }
                accumulate(grads, *x, self.shape(*x), gx)?;
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma);
                let d = gv.numel();
                let mut gx = vec![0.0; xhat.len()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut ghat = vec![0.0; d];
                for (r, &inv) in rstd.iter().enumerate() {
                    let gr = &gd[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    for c in 0..d {
                        ghat[c] = gr[c] * gv.data()[c];
                        ggamma[c] += gr[c] * hr[c];
                        gbeta[c] += gr[c];
                    }
                    let mean_g = ghat.iter().sum::<f64>() / d as f64;
                    let mean_gh = ops::dot(&ghat, hr) / d as f64;
                    for c in 0..d {
                        gx[r * d + c] = inv * (ghat[c] - mean_g - hr[c] * mean_gh);
                    }
                }
                accumulate(grads, *x, self.shape(*x), gx)?;
                accumulate(grads, *gamma, gv.shape(), ggamma)?;
                accumulate(grads, *beta, self.shape(*beta), gbeta)?;
            }
            Op::Conv2d { x, kernel, geo } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (c_in, c_out) = (kv.shape()[2], kv.shape()[3]);
                let (gx, gk) = ops::conv2d_backward(xv.data(), kv.data(), gd, geo, c_in, c_out);
                accumulate(grads, *x, xv.shape(), gx)?;
                accumulate(grads, *kernel, kv.shape(), gk)?;
            }
            Op::ConvTranspose2d { x, kernel, geo } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (c_out, c_in) = (kv.shape()[2], kv.shape()[3]);
                let (gx, gk) = ops::conv_transpose2d_backward(xv.data(), kv.data(), gd, geo, c_in, c_out);
                accumulate(grads, *x, xv.shape(), gx)?;
                accumulate(grads, *kernel, kv.shape(), gk)?;
            }
            Op::AvgPool { x, k } => {
                let xv = self.value(*x);
                let (oh, ow, c) = (node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]);
                let mut gx = ops::nearest_upsample(gd, oh, ow, c, *k);
                let inv = 1.0 / (k * k) as f64;
                gx.iter_mut().for_each(|v| *v *= inv);
                accumulate(grads, *x, xv.shape(), gx)?;
            }
            Op::NearestUp { x, k } => {
                let s = node.value.shape();
                let gx = ops::block_sum(gd, s[0], s[1], s[2], *k);
                accumulate(grads, *x, self.shape(*x), gx)?;
            }
            Op::SliceChannels { x, start } => {
                let xv = self.value(*x);
                let (c, len) = (xv.last_dim(), node.value.last_dim());
                let mut gx = vec![0.0; xv.numel()];
                for (dst, src) in gx.chunks_exact_mut(c).zip(gd.chunks_exact(len)) {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                accumulate(grads, *x, xv.shape(), gx)?;
            }
            Op::ConcatChannels { parts } => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.last_dim();
                    let mut gp = Vec::with_capacity(pv.numel());
                    for row in gd.chunks_exact(total) {
                        gp.extend_from_slice(&row[offset..offset + c]);
                    }
                    accumulate(grads, p, pv.shape(), gp)?;
                    offset += c;
                }
            }
            Op::WindowAttention { q, k, v, spec, saved } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (gq, gk, gv) = attention::window_backward(qv, kv, vv, g, spec, saved);
                accumulate(grads, *q, qv.shape(), gq)?;
                accumulate(grads, *k, kv.shape(), gk)?;
                accumulate(grads, *v, vv.shape(), gv)?;
            }
        }
        Ok(())
    }
}

fn saved_bytes(op: &Op) -> usize {
    const F: usize = std::mem::size_of::<f64>();
    match op {
        Op::LayerNorm { xhat, rstd, .. } => (xhat.len() + rstd.len()) * F,
        Op::MulConst { factor, .. } => factor.size_bytes(),
        Op::Mse { target, .. } => target.size_bytes(),
        Op::WindowAttention { saved, .. } => saved.size_bytes(),
        _ => 0,
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], data: Vec<f64>) -> Result<()> {
    let incoming = Tensor::new(shape.to_vec(), data)?;
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&incoming),
        slot @ None => *slot = Some(incoming),
    }
    Ok(())
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn map_dims(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::dim(op, format!("expected a [H, W, C] map, got {:?}", x.shape()))),
    }
}

fn conv_dims(op: &'static str, x: &Tensor, kernel: &Tensor, transposed: bool) -> Result<(usize, usize, usize, usize, usize)> {
    let (h, w, c) = map_dims(op, x)?;
    let &[k0, k1, a, b] = kernel.shape() else {
        return Err(Error::dim(op, format!("kernel must be [k, k, c, c'], got {:?}", kernel.shape())));
    };
    // conv2d kernels are [k, k, in, out]; transposed kernels are [k, k, out, in].
    let (k_in, k_out) = if transposed { (b, a) } else { (a, b) };
    if k0 != k1 || k_in != c {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    Ok((h, w, c, k0, k_out))
}
