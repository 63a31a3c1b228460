//! Dense and windowed softmax attention on 2-D token grids.
//!
//! Heads split the model width into contiguous channel groups. Head `h` owns
//! channels `h·d_head .. (h+1)·d_head` and its own `d_head × d_head`
//! query/key/value projections. Head outputs are concatenated; any output
//! projection belongs to the caller.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops;
use crate::rng;
use crate::tensor::Tensor;

/// Sliding-window geometry: `window × window` tokens moved by `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub window: usize,
    pub stride: usize,
    /// Divide each output position by the number of windows covering it.
    pub normalize_coverage: bool,
}

impl WindowSpec {
    pub fn new(window: usize, stride: usize) -> Result<Self> {
        if window == 0 || stride == 0 || stride > window {
            return Err(Error::Config(format!(
                "window spec needs 1 <= stride <= window, got window {window}, stride {stride}"
            )));
        }
        Ok(Self {
            window,
            stride,
            normalize_coverage: true,
        })
    }

    /// Non-overlapping partition into `window × window` blocks.
    pub fn partition(window: usize) -> Result<Self> {
        Self::new(window, window)
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    /// Checks that windows tile an `h × w` grid exactly.
    pub fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        if self.window == 0 || self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!("invalid window spec {self:?}")));
        }
        if self.window > h.min(w) {
            return Err(Error::Config(format!(
                "window {} does not fit a {h}x{w} grid; shrink the window or enlarge the grid",
                self.window
            )));
        }
        if (h - self.window) % self.stride != 0 || (w - self.window) % self.stride != 0 {
            return Err(Error::Config(format!(
                "windows of size {} at stride {} leave the edge of a {h}x{w} grid uncovered",
                self.window, self.stride
            )));
        }
        Ok(())
    }

    /// Number of window positions along an axis of length `len`.
    pub fn positions(&self, len: usize) -> usize {
        (len - self.window) / self.stride + 1
    }

    /// Per-axis coverage count: how many windows contain each index.
    pub fn axis_coverage(&self, len: usize) -> Vec<usize> {
        let mut cov = vec![0; len];
        for p in 0..self.positions(len) {
            for c in &mut cov[p * self.stride..p * self.stride + self.window] {
                *c += 1;
            }
        }
        cov
    }

    /// Row-major `h × w` coverage map (outer product of the axis counts).
    pub fn coverage(&self, h: usize, w: usize) -> Vec<usize> {
        let (rows, cols) = (self.axis_coverage(h), self.axis_coverage(w));
        rows.iter().flat_map(|r| cols.iter().map(move |c| r * c)).collect()
    }
}

/// Activations saved by the windowed attention kernel for its backward pass.
#[derive(Debug, Clone)]
pub struct WindowCache {
    /// Softmax probabilities, `window_tokens²` per window in iteration order.
    probs: Vec<f64>,
    /// Per-position output scale (reciprocal coverage, or 1).
    out_scale: Vec<f64>,
}

impl WindowCache {
    pub fn size_bytes(&self) -> usize {
        (self.probs.len() + self.out_scale.len()) * std::mem::size_of::<f64>()
    }
}

fn window_tokens(spec: &WindowSpec, w: usize, i0: usize, j0: usize, idx: &mut Vec<usize>) {
    idx.clear();
    for a in 0..spec.window {
        for b in 0..spec.window {
            idx.push((i0 + a) * w + j0 + b);
        }
    }
}

/// Fused forward of windowed attention for one head. Windows are visited in
/// row-major anchor order, which fixes the scatter-add order.
pub(crate) fn window_forward(q: &Tensor, k: &Tensor, v: &Tensor, spec: &WindowSpec) -> (Tensor, WindowCache) {
    let (h, w, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let m = spec.tokens();
    let scale = 1.0 / (dh as f64).sqrt();
    let (ph, pw) = (spec.positions(h), spec.positions(w));
    let mut probs = vec![0.0; ph * pw * m * m];
    let mut out = vec![0.0; h * w * dh];
    let mut idx = Vec::with_capacity(m);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    for wi in 0..ph {
        for wj in 0..pw {
            window_tokens(spec, w, wi * spec.stride, wj * spec.stride, &mut idx);
            let p = &mut probs[(wi * pw + wj) * m * m..][..m * m];
            for (r, &ti) in idx.iter().enumerate() {
                let qi = &qd[ti * dh..][..dh];
                let row = &mut p[r * m..(r + 1) * m];
                for (s, &tj) in row.iter_mut().zip(&idx) {
                    *s = ops::dot(qi, &kd[tj * dh..][..dh]) * scale;
                }
                ops::softmax_in_place(row);
                let o = &mut out[ti * dh..][..dh];
                for (&a, &tj) in row.iter().zip(&idx) {
                    ops::axpy(a, &vd[tj * dh..][..dh], o);
                }
            }
        }
    }

    let out_scale: Vec<f64> = if spec.normalize_coverage {
        spec.coverage(h, w).into_iter().map(|c| 1.0 / c as f64).collect()
    } else {
        vec![1.0; h * w]
    };
    for (px, &s) in out.chunks_exact_mut(dh).zip(&out_scale) {
        px.iter_mut().for_each(|v| *v *= s);
    }
    let out = Tensor::new(vec![h, w, dh], out).expect("window output shape");
    (out, WindowCache { probs, out_scale })
}

pub(crate) fn window_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    grad_out: &Tensor,
    spec: &WindowSpec,
    cache: &WindowCache,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, w, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let m = spec.tokens();
    let scale = 1.0 / (dh as f64).sqrt();
    let (ph, pw) = (spec.positions(h), spec.positions(w));
    let (qd, kd, vd) = (q.data(), k.data(), v.data());

    let mut g = grad_out.data().to_vec();
    for (px, &s) in g.chunks_exact_mut(dh).zip(&cache.out_scale) {
        px.iter_mut().for_each(|v| *v *= s);
    }
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    let mut idx = Vec::with_capacity(m);
    let mut gs = vec![0.0; m];

    for wi in 0..ph {
        for wj in 0..pw {
            window_tokens(spec, w, wi * spec.stride, wj * spec.stride, &mut idx);
            let p = &cache.probs[(wi * pw + wj) * m * m..][..m * m];
            for (r, &ti) in idx.iter().enumerate() {
                let go = &g[ti * dh..][..dh];
                let row = &p[r * m..(r + 1) * m];
                let mut inner = 0.0;
                for ((gsv, &a), &tj) in gs.iter_mut().zip(row).zip(&idx) {
                    let dp = ops::dot(go, &vd[tj * dh..][..dh]);
                    *gsv = dp;
                    inner += a * dp;
                    ops::axpy(a, go, &mut gv[tj * dh..][..dh]);
                }
                for (gsv, &a) in gs.iter_mut().zip(row) {
                    *gsv = a * (*gsv - inner) * scale;
                }
                let qi = &qd[ti * dh..][..dh];
                for (&gsv, &tj) in gs.iter().zip(&idx) {
                    ops::axpy(gsv, &kd[tj * dh..][..dh], &mut gq[ti * dh..][..dh]);
                    ops::axpy(gsv, qi, &mut gk[tj * dh..][..dh]);
                }
            }
        }
    }
    (gq, gk, gv)
}

/// Projection weights of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T = Tensor> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub b_q: Option<T>,
    pub b_k: Option<T>,
    pub b_v: Option<T>,
}

/// One set of per-head projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub heads: Vec<HeadParams<T>>,
    pub d_head: usize,
}

impl AttentionParams {
    /// Projections drawn from `N(0, 1/d_head)`, biases zero.
    pub fn init(heads: usize, d_head: usize, use_bias: bool, seed: u64, prefix: &str) -> Result<Self> {
        if heads == 0 || d_head == 0 {
            return Err(Error::Config(format!(
                "attention needs at least one head of positive width, got heads={heads}, d_head={d_head}"
            )));
        }
        let std = 1.0 / (d_head as f64).sqrt();
        let draw = |name: &str| -> Tensor {
            let mut r: ChaCha8Rng = rng::rng_from(rng::named_seed(seed, name));
            rng::normal_tensor(&[d_head, d_head], std, &mut r)
        };
        let heads = (0..heads)
            .map(|h| {
                let p = format!("{prefix}.head{h}");
                let bias = || use_bias.then(|| Tensor::zeros(&[d_head]));
                HeadParams {
                    w_q: draw(&format!("{p}.w_q")),
                    w_k: draw(&format!("{p}.w_k")),
                    w_v: draw(&format!("{p}.w_v")),
                    b_q: bias(),
                    b_k: bias(),
                    b_v: bias(),
                }
            })
            .collect();
        Ok(Self { heads, d_head })
    }
}

impl<T> AttentionParams<T> {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn model_dim(&self) -> usize {
        self.heads.len() * self.d_head
    }

    pub fn use_bias(&self) -> bool {
        self.heads.first().is_some_and(|h| h.b_q.is_some())
    }

    /// Structure-preserving map over the leaves in canonical order.
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T) -> U) -> AttentionParams<U> {
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(h, hp)| {
                let p = format!("{prefix}.head{h}");
                HeadParams {
                    w_q: f(format!("{p}.w_q"), &hp.w_q),
                    w_k: f(format!("{p}.w_k"), &hp.w_k),
                    w_v: f(format!("{p}.w_v"), &hp.w_v),
                    b_q: hp.b_q.as_ref().map(|b| f(format!("{p}.b_q"), b)),
                    b_k: hp.b_k.as_ref().map(|b| f(format!("{p}.b_k"), b)),
                    b_v: hp.b_v.as_ref().map(|b| f(format!("{p}.b_v"), b)),
                }
            })
            .collect();
        AttentionParams {
            heads,
            d_head: self.d_head,
        }
    }

    /// Mutable visit in the same order as [`AttentionParams::map`].
    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        for hp in &mut self.heads {
            f(&mut hp.w_q);
            f(&mut hp.w_k);
            f(&mut hp.w_v);
            for b in [&mut hp.b_q, &mut hp.b_k, &mut hp.b_v].into_iter().flatten() {
                f(b);
            }
        }
    }
}

fn project(g: &mut Graph, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_bias(y, b),
        None => Ok(y),
    }
}

fn check_width(g: &Graph, x: NodeId, p: &AttentionParams<NodeId>) -> Result<()> {
    let d = *g.shape(x).last().unwrap();
    if d != p.model_dim() {
        return Err(Error::dim(
            "attention",
            format!("input width {d} != heads {} x d_head {}", p.num_heads(), p.d_head),
        ));
    }
    Ok(())
}

/// Dense multi-head attention over all `H·W` tokens of a `[H, W, d]` map,
/// built from primitive graph ops (`QKᵀ`, row softmax, `AV`).
pub fn full_attention(g: &mut Graph, x: NodeId, p: &AttentionParams<NodeId>) -> Result<NodeId> {
    check_width(g, x, p)?;
    let shape = g.shape(x).to_vec();
    let d = p.model_dim();
    let n = shape[..shape.len() - 1].iter().product();
    let tokens = g.reshape(x, &[n, d])?;
    let scale = 1.0 / (p.d_head as f64).sqrt();
    let mut outs = Vec::with_capacity(p.num_heads());
    for (h, hp) in p.heads.iter().enumerate() {
        let xh = g.slice_channels(tokens, h * p.d_head, p.d_head)?;
        let q = project(g, xh, hp.w_q, hp.b_q)?;
        let k = project(g, xh, hp.w_k, hp.b_k)?;
        let v = project(g, xh, hp.w_v, hp.b_v)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale);
        let a = g.softmax_rows(scores);
        outs.push(g.matmul(a, v)?);
    }
    let merged = g.concat_channels(&outs)?;
    g.reshape(merged, &shape)
}

/// Multi-head attention restricted to sliding windows; overlapping window
/// outputs are averaged by coverage count when `spec.normalize_coverage` is set.
pub fn windowed_attention(
    g: &mut Graph,
    x: NodeId,
    p: &AttentionParams<NodeId>,
    spec: &WindowSpec,
) -> Result<NodeId> {
    check_width(g, x, p)?;
    let &[h, w, _] = g.shape(x) else {
        return Err(Error::dim("windowed_attention", format!("expected [H, W, d], got {:?}", g.shape(x))));
    };
    spec.check_grid(h, w)?;
    let mut outs = Vec::with_capacity(p.num_heads());
    for (i, hp) in p.heads.iter().enumerate() {
        let xh = if p.num_heads() == 1 {
            x
        } else {
            g.slice_channels(x, i * p.d_head, p.d_head)?
        };
        let q = project(g, xh, hp.w_q, hp.b_q)?;
        let k = project(g, xh, hp.w_k, hp.b_k)?;
        let v = project(g, xh, hp.w_v, hp.b_v)?;
        outs.push(g.window_attention(q, k, v, *spec)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_channels(&outs)
    }
}

/// Analytic operation count of one attention pass, split by term.
///
/// Units: one multiply-add counts 1, one exponential counts 1.
/// * `projections = 3 · N · d · d_head` (per-head `d_head × d_head` Q/K/V maps)
/// * `scores = windows · M² · d_head · heads`
/// * `weighted_sum = windows · M² · d_head · heads`
/// * `softmax = windows · M² · heads`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AttentionCost {
    pub projections: u64,
    pub scores: u64,
    pub weighted_sum: u64,
    pub softmax: u64,
}

impl AttentionCost {
    pub fn total(&self) -> u64 {
        self.projections + self.scores + self.weighted_sum + self.softmax
    }

    fn of(tokens: u64, windows: u64, window_tokens: u64, d: u64, heads: u64) -> Self {
        let d_head = d / heads;
        let pairs = windows * window_tokens * window_tokens;
        Self {
            projections: 3 * tokens * d * d_head,
            scores: pairs * d_head * heads,
            weighted_sum: pairs * d_head * heads,
            softmax: pairs * heads,
        }
    }
}

impl std::ops::Add for AttentionCost {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            projections: self.projections + o.projections,
            scores: self.scores + o.scores,
            weighted_sum: self.weighted_sum + o.weighted_sum,
            softmax: self.softmax + o.softmax,
        }
    }
}

/// Cost with `⌈N / M⌉` non-overlapping windows of `M` tokens. `M = N` is
/// dense attention.
pub fn attention_flops(n_tokens: u64, window_tokens: u64, d: u64, heads: u64) -> AttentionCost {
    assert!(n_tokens > 0 && window_tokens > 0 && heads > 0 && d >= heads);
    AttentionCost::of(n_tokens, n_tokens.div_ceil(window_tokens), window_tokens, d, heads)
}

/// Cost of sliding windows at a given stride, counting `⌈N / stride²⌉`
/// windows (edge effects ignored). Equals [`attention_flops`] when
/// `stride == window`.
pub fn windowed_flops(n_tokens: u64, spec: &WindowSpec, d: u64, heads: u64) -> AttentionCost {
    assert!(n_tokens > 0 && heads > 0 && d >= heads);
    let s2 = (spec.stride * spec.stride) as u64;
    AttentionCost::of(n_tokens, n_tokens.div_ceil(s2), spec.tokens() as u64, d, heads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_with_params(heads: usize, d_head: usize, seed: u64) -> (Graph, AttentionParams<NodeId>) {
        let params = AttentionParams::init(heads, d_head, true, seed, "attn").unwrap();
        let mut g = Graph::new();
        let bound = params.map("attn", &mut |name, t| g.param(name, t.clone()));
        (g, bound)
    }

    #[test]
    fn window_spec_validation() {
        assert!(WindowSpec::new(2, 3).is_err());
        assert!(WindowSpec::new(0, 1).is_err());
        let s = WindowSpec::new(2, 1).unwrap();
        assert!(s.check_grid(4, 4).is_ok());
        let msg = WindowSpec::new(8, 8).unwrap().check_grid(4, 4).unwrap_err().to_string();
        assert!(msg.contains("shrink"), "{msg}");
        assert!(WindowSpec::new(2, 2).unwrap().check_grid(5, 5).is_err());
    }

    #[test]
    fn coverage_counts_for_stride_one() {
        let s = WindowSpec::new(2, 1).unwrap();
        assert_eq!(s.axis_coverage(4), vec![1, 2, 2, 1]);
        let cov = s.coverage(4, 4);
        // Direct count of windows containing each cell.
        for i in 0..4 {
            for j in 0..4 {
                let count = (0..3)
                    .flat_map(|a| (0..3).map(move |b| (a, b)))
                    .filter(|&(a, b)| (a..a + 2).contains(&i) && (b..b + 2).contains(&j))
                    .count();
                assert_eq!(cov[i * 4 + j], count);
            }
        }
        assert!(WindowSpec::partition(2).unwrap().coverage(4, 4).iter().all(|&c| c == 1));
    }

    #[test]
    fn single_token_returns_value_row() {
        let (mut g, p) = graph_with_params(1, 3, 5);
        let x = g.constant(Tensor::new(vec![1, 1, 3], vec![0.3, -0.7, 1.1]).unwrap());
        let out = full_attention(&mut g, x, &p).unwrap();
        let xh = g.reshape(x, &[1, 3]).unwrap();
        let v = project(&mut g, xh, p.heads[0].w_v, p.heads[0].b_v).unwrap();
        assert!(g.value(out).clone().reshape(&[1, 3]).unwrap().max_abs_diff(g.value(v)) < 1e-15);
    }

    #[test]
    fn identical_keys_give_mean_of_values() {
        // With W_k = 0 every key is the bias, so attention is uniform.
        let mut params = AttentionParams::init(1, 2, true, 1, "attn").unwrap();
        params.heads[0].w_k = Tensor::zeros(&[2, 2]);
        let mut g = Graph::new();
        let p = params.map("attn", &mut |n, t| g.param(n, t.clone()));
        let x = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap());
        let out = full_attention(&mut g, x, &p).unwrap();
        let xm = g.reshape(x, &[2, 2]).unwrap();
        let v = g.matmul(xm, p.heads[0].w_v).unwrap();
        let vd = g.value(v).data().to_vec();
        let mean = [(vd[0] + vd[2]) / 2.0, (vd[1] + vd[3]) / 2.0];
        let o = g.value(out).data();
        for t in 0..2 {
            assert!((o[2 * t] - mean[0]).abs() < 1e-14);
            assert!((o[2 * t + 1] - mean[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn single_window_equals_full_attention() {
        let (mut g, p) = graph_with_params(2, 3, 11);
        let mut r = rng::rng_from(3);
        let x = g.constant(rng::normal_tensor(&[4, 4, 6], 1.0, &mut r));
        let dense = full_attention(&mut g, x, &p).unwrap();
        let win = windowed_attention(&mut g, x, &p, &WindowSpec::partition(4).unwrap()).unwrap();
        assert!(g.value(dense).max_abs_diff(g.value(win)) < 1e-12);
    }

    #[test]
    fn flops_formula_small_instance() {
        // N=16, M=4, d=8, 1 head: 3·16·8·8 + 2·(4·16·8) + 4·16
        let c = attention_flops(16, 4, 8, 1);
        assert_eq!(c.projections, 3072);
        assert_eq!(c.scores, 512);
        assert_eq!(c.weighted_sum, 512);
        assert_eq!(c.softmax, 64);
        assert_eq!(c.total(), 4160);
        assert_eq!(attention_flops(32, 4, 8, 1).total(), 2 * 4160);
        let dense = attention_flops(16, 16, 8, 1);
        assert_eq!(dense.scores, 16 * 16 * 8);
        assert_eq!(windowed_flops(16, &WindowSpec::partition(2).unwrap(), 8, 1), c);
    }
}
