//! Multipole attention: a V-cycle over a hierarchy of downsampled maps.
//!
//! Level 0 is the input map. Level `ℓ` is obtained from level `ℓ-1` with one
//! shared downsampling operator `D`. Every level is layer-normalized and run
//! through the same windowed attention. Level outputs are brought back to
//! full resolution with one shared upsampling operator `U` and summed:
//!
//! ```text
//! out = Σ_ℓ U^ℓ( attn( norm(X_ℓ) ) ),   X_ℓ = D(X_{ℓ-1}),   U^0 = id
//! ```
//!
//! `U` is linear, so the sum is evaluated coarse-to-fine as
//! `A_0 + U(A_1 + U(A_2 + ...))`.

use crate::attention::{windowed_attention, windowed_flops, AttentionCost, AttentionParams, WindowSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::ConvGeometry;
use crate::rng;
use crate::tensor::Tensor;

/// How levels are resampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    /// Learned per-head convolution down, transposed convolution up.
    LearnedConv,
    /// `k×k` mean pooling down, nearest-neighbour replication up.
    AveragePool,
}

impl SamplerMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SamplerMode::LearnedConv => "conv",
            SamplerMode::AveragePool => "avg_pool",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv" | "learned_conv" => Ok(SamplerMode::LearnedConv),
            "avg_pool" | "average_pool" | "pool" => Ok(SamplerMode::AveragePool),
            other => Err(Error::Config(format!("unknown sampler mode `{other}`"))),
        }
    }
}

/// Hierarchy configuration of one multipole layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MultipoleConfig {
    /// Number of downsampling steps `L`; there are `L + 1` levels.
    pub levels: usize,
    /// Kernel size and resampling factor `k`.
    pub sampling_rate: usize,
    pub down_stride: usize,
    pub padding: usize,
    pub window: WindowSpec,
    pub sampler: SamplerMode,
    /// Reuse the down kernel as the up kernel.
    pub share_du: bool,
    pub norm_eps: f64,
}

impl Default for MultipoleConfig {
    fn default() -> Self {
        Self {
            levels: 0,
            sampling_rate: 2,
            down_stride: 2,
            padding: 0,
            window: WindowSpec {
                window: 2,
                stride: 1,
                normalize_coverage: true,
            },
            sampler: SamplerMode::LearnedConv,
            share_du: false,
            norm_eps: 1e-5,
        }
    }
}

impl MultipoleConfig {
    pub fn with_levels(levels: usize) -> Self {
        Self {
            levels,
            ..Self::default()
        }
    }

    /// Largest `L` such that the coarsest `side / k^L` grid still fits the window.
    pub fn max_levels(side: usize, sampling_rate: usize, window: usize) -> usize {
        let mut levels = 0;
        let mut s = side;
        while sampling_rate > 1 && s % sampling_rate == 0 && s / sampling_rate >= window {
            s /= sampling_rate;
            levels += 1;
        }
        levels
    }

    /// Grid shapes of levels `0..=L` for an `h × w` input, validating that
    /// every level fits the window and that upsampling restores each finer shape.
    pub fn level_shapes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        if self.sampling_rate == 0 || self.down_stride == 0 {
            return Err(Error::Config("sampling rate and stride must be positive".into()));
        }
        let mut shapes = vec![(h, w)];
        let (k, s, p) = (self.sampling_rate, self.down_stride, self.padding);
        for level in 1..=self.levels {
            let (ph, pw) = shapes[level - 1];
            let next = match self.sampler {
                SamplerMode::LearnedConv => {
                    let geo = ConvGeometry::conv(ph, pw, k, s, p).ok_or_else(|| {
                        Error::Config(format!("level {level}: kernel {k} does not fit a {ph}x{pw} grid"))
                    })?;
                    let back = ConvGeometry::transpose(geo.out_h, geo.out_w, k, s, p);
                    if back.map(|b| (b.out_h, b.out_w)) != Some((ph, pw)) {
                        return Err(Error::Config(format!(
                            "level {level}: kernel {k}, stride {s}, padding {p} cannot restore a {ph}x{pw} grid"
                        )));
                    }
                    (geo.out_h, geo.out_w)
                }
                SamplerMode::AveragePool => {
                    if ph % k != 0 || pw % k != 0 {
                        return Err(Error::Config(format!(
                            "level {level}: grid {ph}x{pw} is not divisible by {k}"
                        )));
                    }
                    (ph / k, pw / k)
                }
            };
            shapes.push(next);
        }
        for (level, &(lh, lw)) in shapes.iter().enumerate() {
            self.window
                .check_grid(lh, lw)
                .map_err(|e| Error::Config(format!("level {level} ({lh}x{lw}): {e}")))?;
        }
        Ok(shapes)
    }
}

/// Parameters of one multipole layer. A single attention block and a single
/// down/up kernel pair per head serve every level.
#[derive(Debug, Clone, PartialEq)]
pub struct MultipoleParams<T = Tensor> {
    pub attention: AttentionParams<T>,
    /// Per-head `[k, k, d_head, d_head]` convolution kernels.
    pub down: Vec<T>,
    /// Per-head `[k, k, d_head, d_head]` transposed-convolution kernels;
    /// empty when `share_du` is set.
    pub up: Vec<T>,
    pub norm_gamma: T,
    pub norm_beta: T,
}

impl MultipoleParams {
    /// Attention from `N(0, 1/d_head)`; kernels start at the average-pool and
    /// nearest-replication equivalents plus `N(0, 0.01²)` noise.
    pub fn init(
        heads: usize,
        d_head: usize,
        use_bias: bool,
        cfg: &MultipoleConfig,
        seed: u64,
        prefix: &str,
    ) -> Result<Self> {
        let attention = AttentionParams::init(heads, d_head, use_bias, seed, &format!("{prefix}.attn"))?;
        let k = cfg.sampling_rate;
        let kernel = |name: String, diag: f64| -> Tensor {
            let mut r = rng::rng_from(rng::named_seed(seed, &name));
            let mut t = rng::normal_tensor(&[k, k, d_head, d_head], 0.01, &mut r);
            let data = t.data_mut();
            for tap in 0..k * k {
                for c in 0..d_head {
                    data[(tap * d_head + c) * d_head + c] += diag;
                }
            }
            t
        };
        let (down, up) = match cfg.sampler {
            SamplerMode::AveragePool => (Vec::new(), Vec::new()),
            SamplerMode::LearnedConv => {
                let down = (0..heads)
                    .map(|h| kernel(format!("{prefix}.down.head{h}"), 1.0 / (k * k) as f64))
                    .collect();
                let up = if cfg.share_du {
                    Vec::new()
                } else {
                    (0..heads).map(|h| kernel(format!("{prefix}.up.head{h}"), 1.0)).collect()
                };
                (down, up)
            }
        };
        let d = heads * d_head;
        Ok(Self {
            attention,
            down,
            up,
            norm_gamma: Tensor::full(&[d], 1.0),
            norm_beta: Tensor::zeros(&[d]),
        })
    }
}

impl<T> MultipoleParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T) -> U) -> MultipoleParams<U> {
        MultipoleParams {
            attention: self.attention.map(&format!("{prefix}.attn"), f),
            down: self
                .down
                .iter()
                .enumerate()
                .map(|(h, t)| f(format!("{prefix}.down.head{h}"), t))
                .collect(),
            up: self
                .up
                .iter()
                .enumerate()
                .map(|(h, t)| f(format!("{prefix}.up.head{h}"), t))
                .collect(),
            norm_gamma: f(format!("{prefix}.norm.gamma"), &self.norm_gamma),
            norm_beta: f(format!("{prefix}.norm.beta"), &self.norm_beta),
        }
    }

    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        self.attention.for_each_mut(f);
        self.down.iter_mut().for_each(&mut *f);
        self.up.iter_mut().for_each(&mut *f);
        f(&mut self.norm_gamma);
        f(&mut self.norm_beta);
    }
}

impl MultipoleParams<Tensor> {
    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.map("", &mut |_, t| n += t.numel());
        n
    }
}

fn per_head(
    g: &mut Graph,
    x: NodeId,
    d_head: usize,
    kernels: &[NodeId],
    mut op: impl FnMut(&mut Graph, NodeId, NodeId) -> Result<NodeId>,
) -> Result<NodeId> {
    if kernels.len() == 1 {
        return op(g, x, kernels[0]);
    }
    let mut outs = Vec::with_capacity(kernels.len());
    for (h, &kernel) in kernels.iter().enumerate() {
        let xh = g.slice_channels(x, h * d_head, d_head)?;
        outs.push(op(g, xh, kernel)?);
    }
    g.concat_channels(&outs)
}

/// One step down the hierarchy.
pub fn downsample(g: &mut Graph, x: NodeId, p: &MultipoleParams<NodeId>, cfg: &MultipoleConfig) -> Result<NodeId> {
    let k = cfg.sampling_rate;
    let (h, w) = (g.shape(x)[0], g.shape(x)[1]);
    for (axis, side) in [("height", h), ("width", w)] {
        if k == 0 || side % k != 0 {
            return Err(Error::dim(
                "downsample",
                format!("{axis} {side} is not divisible by sampling rate {k}"),
            ));
        }
    }
    match cfg.sampler {
        SamplerMode::AveragePool => g.avg_pool(x, k),
        SamplerMode::LearnedConv => per_head(g, x, p.attention.d_head, &p.down, |g, xh, kern| {
            g.conv2d(xh, kern, cfg.down_stride, cfg.padding)
        }),
    }
}

/// One step up the hierarchy.
pub fn upsample(g: &mut Graph, x: NodeId, p: &MultipoleParams<NodeId>, cfg: &MultipoleConfig) -> Result<NodeId> {
    match cfg.sampler {
        SamplerMode::AveragePool => g.upsample_nearest(x, cfg.sampling_rate),
        SamplerMode::LearnedConv => {
            let kernels = if cfg.share_du { &p.down } else { &p.up };
            per_head(g, x, p.attention.d_head, kernels, |g, xh, kern| {
                g.conv_transpose2d(xh, kern, cfg.down_stride, cfg.padding)
            })
        }
    }
}

/// Full multipole attention of a `[H, W, d]` map; output has the input shape.
pub fn multipole_attention(
    g: &mut Graph,
    x: NodeId,
    p: &MultipoleParams<NodeId>,
    cfg: &MultipoleConfig,
) -> Result<NodeId> {
    let &[h, w, _] = g.shape(x) else {
        return Err(Error::dim("multipole_attention", format!("expected [H, W, d], got {:?}", g.shape(x))));
    };
    cfg.level_shapes(h, w)?;

    let mut attended = Vec::with_capacity(cfg.levels + 1);
    let mut level = x;
    for l in 0..=cfg.levels {
        if l > 0 {
            level = downsample(g, level, p, cfg)?;
        }
        let normed = g.layer_norm(level, p.norm_gamma, p.norm_beta, cfg.norm_eps)?;
        attended.push(windowed_attention(g, normed, &p.attention, &cfg.window)?);
    }
    let mut acc = attended.pop().expect("at least one level");
    while let Some(finer) = attended.pop() {
        let up = upsample(g, acc, p, cfg)?;
        acc = g.add(finer, up)?;
    }
    Ok(acc)
}

/// Analytic cost of [`multipole_attention`].
///
/// With `N_ℓ` tokens at level `ℓ`, `k` the sampling rate and `d_head = d / heads`:
/// * attention: `Σ_ℓ windowed_flops(N_ℓ)`
/// * learned sampling: `Σ_{ℓ≥1} 2 · N_ℓ · k² · d · d_head` (one conv down, one
///   transposed conv up); average pooling counts `N_{ℓ-1} · d` per step down
/// * level sums: `Σ_{ℓ≥1} N_{ℓ-1} · d`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MultipoleCost {
    pub attention: AttentionCost,
    pub sampling: u64,
    pub merge: u64,
}

impl MultipoleCost {
    pub fn total(&self) -> u64 {
        self.attention.total() + self.sampling + self.merge
    }
}

pub fn multipole_flops(h: usize, w: usize, d: usize, heads: usize, cfg: &MultipoleConfig) -> Result<MultipoleCost> {
    let shapes = cfg.level_shapes(h, w)?;
    let (d, heads) = (d as u64, heads as u64);
    let k2 = (cfg.sampling_rate * cfg.sampling_rate) as u64;
    let d_head = d / heads;
    let mut cost = MultipoleCost::default();
    for (l, &(lh, lw)) in shapes.iter().enumerate() {
        let n = (lh * lw) as u64;
        cost.attention = cost.attention + windowed_flops(n, &cfg.window, d, heads);
        if l > 0 {
            let finer = (shapes[l - 1].0 * shapes[l - 1].1) as u64;
            cost.sampling += match cfg.sampler {
                SamplerMode::LearnedConv => 2 * n * k2 * d * d_head,
                SamplerMode::AveragePool => finer * d,
            };
            cost.merge += finer * d;
        }
    }
    Ok(cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{attention_flops, full_attention};

    fn bind(g: &mut Graph, p: &MultipoleParams) -> MultipoleParams<NodeId> {
        p.map("mp", &mut |n, t| g.param(n, t.clone()))
    }

    #[test]
    fn average_pool_of_constant_is_constant() {
        let cfg = MultipoleConfig {
            sampler: SamplerMode::AveragePool,
            ..MultipoleConfig::with_levels(1)
        };
        let p = MultipoleParams::init(1, 2, false, &cfg, 0, "mp").unwrap();
        let mut g = Graph::new();
        let b = bind(&mut g, &p);
        let x = g.constant(Tensor::full(&[4, 4, 2], 3.25));
        let y = downsample(&mut g, x, &b, &cfg).unwrap();
        assert_eq!(g.value(y), &Tensor::full(&[2, 2, 2], 3.25));
    }

    #[test]
    fn mean_kernel_reproduces_pooling() {
        let cfg = MultipoleConfig::with_levels(1);
        let mut p = MultipoleParams::init(2, 2, false, &cfg, 0, "mp").unwrap();
        for kern in &mut p.down {
            let mut t = Tensor::zeros(&[2, 2, 2, 2]);
            for tap in 0..4 {
                for c in 0..2 {
                    t.data_mut()[(tap * 2 + c) * 2 + c] = 0.25;
                }
            }
            *kern = t;
        }
        let mut g = Graph::new();
        let b = bind(&mut g, &p);
        let mut r = rng::rng_from(9);
        let x = g.constant(rng::normal_tensor(&[8, 8, 4], 1.0, &mut r));
        let conv = downsample(&mut g, x, &b, &cfg).unwrap();
        let pooled = g.avg_pool(x, 2).unwrap();
        assert!(g.value(conv).max_abs_diff(g.value(pooled)) < 1e-15);
    }

    #[test]
    fn non_divisible_side_is_reported() {
        let cfg = MultipoleConfig::with_levels(1);
        let p = MultipoleParams::init(1, 2, false, &cfg, 0, "mp").unwrap();
        let mut g = Graph::new();
        let b = bind(&mut g, &p);
        let x = g.constant(Tensor::zeros(&[6, 5, 2]));
        let msg = downsample(&mut g, x, &b, &cfg).unwrap_err().to_string();
        assert!(msg.contains("width 5"), "{msg}");
    }

    #[test]
    fn ones_kernel_replicates() {
        let cfg = MultipoleConfig::with_levels(1);
        let mut p = MultipoleParams::init(1, 1, false, &cfg, 0, "mp").unwrap();
        p.up[0] = Tensor::full(&[2, 2, 1, 1], 1.0);
        let mut g = Graph::new();
        let b = bind(&mut g, &p);
        let x = g.constant(Tensor::full(&[1, 1, 1], 0.7));
        let y = upsample(&mut g, x, &b, &cfg).unwrap();
        assert_eq!(g.value(y), &Tensor::full(&[2, 2, 1], 0.7));
    }

    #[test]
    fn up_down_shape_contract() {
        let cfg = MultipoleConfig::with_levels(1);
        let p = MultipoleParams::init(2, 3, true, &cfg, 4, "mp").unwrap();
        let mut g = Graph::new();
        let b = bind(&mut g, &p);
        let x = g.constant(Tensor::full(&[8, 8, 6], 1.0));
        let down = downsample(&mut g, x, &b, &cfg).unwrap();
        let up = upsample(&mut g, down, &b, &cfg).unwrap();
        assert_eq!(g.shape(up), &[8, 8, 6]);
    }

    #[test]
    fn up_is_adjoint_of_down_with_equal_kernels() {
        let cfg = MultipoleConfig::with_levels(1);
        let mut p = MultipoleParams::init(2, 2, false, &cfg, 1, "mp").unwrap();
        p.up = p.down.clone();
        let mut g = Graph::new();
        let b = bind(&mut g, &p);
        let mut r = rng::rng_from(2);
        let x = g.constant(rng::normal_tensor(&[8, 8, 4], 1.0, &mut r));
        let y = g.constant(rng::normal_tensor(&[4, 4, 4], 1.0, &mut r));
        let dx = downsample(&mut g, x, &b, &cfg).unwrap();
        let uy = upsample(&mut g, y, &b, &cfg).unwrap();
        let lhs = g.value(dx).dot(g.value(y));
        let rhs = g.value(x).dot(g.value(uy));
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn zero_levels_is_windowed_attention_of_normed_input() {
        let cfg = MultipoleConfig {
            window: WindowSpec::partition(4).unwrap(),
            ..MultipoleConfig::with_levels(0)
        };
        let p = MultipoleParams::init(2, 2, true, &cfg, 3, "mp").unwrap();
        let mut g = Graph::new();
        let b = bind(&mut g, &p);
        let mut r = rng::rng_from(5);
        let x = g.constant(rng::normal_tensor(&[4, 4, 4], 1.0, &mut r));
        let out = multipole_attention(&mut g, x, &b, &cfg).unwrap();
        let normed = g.layer_norm(x, b.norm_gamma, b.norm_beta, cfg.norm_eps).unwrap();
        let win = windowed_attention(&mut g, normed, &b.attention, &cfg.window).unwrap();
        assert_eq!(g.value(out), g.value(win));
        let dense = full_attention(&mut g, normed, &b.attention).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(dense)) < 1e-12);
    }

    #[test]
    fn coarsest_level_must_fit_window() {
        let cfg = MultipoleConfig::with_levels(3);
        assert!(cfg.level_shapes(8, 8).is_err());
        assert_eq!(cfg.level_shapes(16, 16).unwrap().last(), Some(&(2, 2)));
        assert_eq!(MultipoleConfig::max_levels(64, 2, 2), 5);
        assert_eq!(MultipoleConfig::max_levels(16, 2, 2), 3);
        let literal = MultipoleConfig {
            down_stride: 1,
            ..MultipoleConfig::with_levels(1)
        };
        // Kernel 2 at stride 1 only trims one cell instead of halving.
        assert_eq!(literal.level_shapes(8, 8).unwrap(), vec![(8, 8), (7, 7)]);
    }

    #[test]
    fn param_count_hand_example_and_level_invariance() {
        let cfg = MultipoleConfig::with_levels(1);
        let p = MultipoleParams::init(1, 2, false, &cfg, 0, "mp").unwrap();
        assert_eq!(p.param_count(), 12 + 16 + 16 + 2 * 2);
        let p3 = MultipoleParams::init(1, 2, false, &MultipoleConfig::with_levels(3), 0, "mp").unwrap();
        assert_eq!(p.param_count(), p3.param_count());
        assert!(MultipoleParams::init(0, 2, false, &cfg, 0, "mp").is_err());
    }

    #[test]
    fn flops_degenerate_and_linear() {
        let cfg = MultipoleConfig {
            window: WindowSpec::partition(2).unwrap(),
            ..MultipoleConfig::with_levels(0)
        };
        let c = multipole_flops(8, 8, 8, 2, &cfg).unwrap();
        assert_eq!(c.total(), attention_flops(64, 4, 8, 2).total());

        let at = |n: usize| {
            let cfg = MultipoleConfig::with_levels(MultipoleConfig::max_levels(n, 2, 2));
            multipole_flops(n, n, 32, 2, &cfg).unwrap().total() as f64
        };
        let ratio = at(32) / at(16);
        assert!((3.9..=4.1).contains(&ratio), "{ratio}");
        let dense = |n: u64| attention_flops(n * n, n * n, 32, 2).total() as f64;
        let dr = dense(32) / dense(16);
        assert!((15.0..=16.0).contains(&dr), "{dr}");
    }
}
