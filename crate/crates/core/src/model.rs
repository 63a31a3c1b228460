//! The neural operator: lifting, pre-norm attention/MLP blocks and a pointwise
//! decoder. Every layer acts per grid cell or through windowed attention, so
//! one set of weights applies at any resolution.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::WindowSpec;
use crate::config::KvMap;
use crate::darcy::{DarcySample, Field};
use crate::error::{Error, Result};
use crate::gradcheck::Differentiable;
use crate::graph::{Graph, NodeId};
use crate::multipole::{multipole_attention, MultipoleConfig, MultipoleParams, SamplerMode};
use crate::rng;
use crate::tensor::Tensor;

/// Which token mixer the blocks use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Multipole,
    /// Single-level sliding-window attention.
    Windowed,
    /// All-to-all attention: one window covering the whole grid.
    Dense,
}

impl AttentionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionKind::Multipole => "multipole",
            AttentionKind::Windowed => "windowed",
            AttentionKind::Dense => "dense",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multipole" => Ok(AttentionKind::Multipole),
            "windowed" | "window" => Ok(AttentionKind::Windowed),
            "dense" | "full" => Ok(AttentionKind::Dense),
            other => Err(Error::Config(format!("unknown attention kind `{other}`"))),
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub d_head: usize,
    pub mlp_dim: usize,
    pub window: usize,
    pub window_stride: usize,
    /// `None` picks the deepest hierarchy the grid allows.
    pub levels: Option<usize>,
    pub sampling_rate: usize,
    pub sampler: SamplerMode,
    pub share_du: bool,
    pub use_bias: bool,
    pub attention: AttentionKind,
    pub emb_dropout: f64,
    pub att_dropout: f64,
    pub norm_eps: f64,
    pub init_seed: u64,
    /// Input normalisation `(a - a_shift) / a_scale`.
    pub a_shift: f64,
    pub a_scale: f64,
    /// Network output is multiplied by this to give `u`.
    pub u_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            depth: 8,
            heads: 4,
            d_head: 32,
            mlp_dim: 128,
            window: 2,
            window_stride: 1,
            levels: None,
            sampling_rate: 2,
            sampler: SamplerMode::LearnedConv,
            share_du: false,
            use_bias: true,
            attention: AttentionKind::Multipole,
            emb_dropout: 0.1,
            att_dropout: 0.1,
            norm_eps: 1e-5,
            init_seed: 0,
            a_shift: 0.0,
            a_scale: 1.0,
            u_scale: 1.0,
        }
    }
}

const MODEL_KEYS: &[&str] = &[
    "dim",
    "depth",
    "heads",
    "d_head",
    "mlp_dim",
    "window",
    "window_stride",
    "levels",
    "sampling_rate",
    "sampler",
    "share_du",
    "use_bias",
    "attention",
    "emb_dropout",
    "att_dropout",
    "norm_eps",
    "init_seed",
    "a_shift",
    "a_scale",
    "u_scale",
];

impl ModelConfig {
    /// Width of the attention stream.
    pub fn attn_dim(&self) -> usize {
        self.heads * self.d_head
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.d_head == 0 || self.mlp_dim == 0 {
            return fail("dim, heads, d_head and mlp_dim must be positive".into());
        }
        if self.window == 0 || self.window_stride == 0 || self.window_stride > self.window {
            return fail(format!(
                "window stride must lie in 1..={} (got {})",
                self.window, self.window_stride
            ));
        }
        if self.sampling_rate < 2 {
            return fail(format!("sampling rate must be at least 2, got {}", self.sampling_rate));
        }
        for (name, p) in [("emb_dropout", self.emb_dropout), ("att_dropout", self.att_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps must be positive".into());
        }
        if !(self.a_scale > 0.0 && self.u_scale > 0.0) || !self.a_shift.is_finite() {
            return fail("normalisation scales must be positive and finite".into());
        }
        Ok(())
    }

    /// Multipole configuration used at grid side `n`, with the hierarchy depth
    /// resolved and every level checked against the window.
    pub fn mixer_config(&self, n: usize) -> Result<MultipoleConfig> {
        let window = match self.attention {
            AttentionKind::Dense => WindowSpec::new(n, n)?,
            _ => WindowSpec::new(self.window, self.window_stride)?,
        };
        let mut cfg = MultipoleConfig {
            levels: 0,
            sampling_rate: self.sampling_rate,
            down_stride: self.sampling_rate,
            padding: 0,
            window,
            sampler: self.sampler,
            share_du: self.share_du,
            norm_eps: self.norm_eps,
        };
        if self.attention == AttentionKind::Multipole {
            let max = MultipoleConfig::max_levels(n, self.sampling_rate, self.window);
            cfg.levels = self.levels.map_or(max, |l| l.min(max));
        }
        cfg.level_shapes(n, n)
            .map_err(|e| Error::Config(format!("grid {n}x{n}: {e}")))?;
        Ok(cfg)
    }

    pub fn write_kv(&self, map: &mut KvMap, prefix: &str) {
        let levels = self.levels.map_or("auto".to_string(), |l| l.to_string());
        let values: [String; 20] = [
            self.dim.to_string(),
            self.depth.to_string(),
            self.heads.to_string(),
            self.d_head.to_string(),
            self.mlp_dim.to_string(),
            self.window.to_string(),
            self.window_stride.to_string(),
            levels,
            self.sampling_rate.to_string(),
            self.sampler.as_str().to_string(),
            self.share_du.to_string(),
            self.use_bias.to_string(),
            self.attention.as_str().to_string(),
            self.emb_dropout.to_string(),
            self.att_dropout.to_string(),
            self.norm_eps.to_string(),
            self.init_seed.to_string(),
            self.a_shift.to_string(),
            self.a_scale.to_string(),
            self.u_scale.to_string(),
        ];
        for (k, v) in MODEL_KEYS.iter().zip(values) {
            map.set(format!("{prefix}{k}"), v);
        }
    }

    /// Overrides fields present in `map` (consuming those keys).
    pub fn read_kv(&mut self, map: &mut KvMap, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}{k}");
        map.take_into(&key("dim"), &mut self.dim)?;
        map.take_into(&key("depth"), &mut self.depth)?;
        map.take_into(&key("heads"), &mut self.heads)?;
        map.take_into(&key("d_head"), &mut self.d_head)?;
        map.take_into(&key("mlp_dim"), &mut self.mlp_dim)?;
        map.take_into(&key("window"), &mut self.window)?;
        map.take_into(&key("window_stride"), &mut self.window_stride)?;
        if let Some(v) = map.take_raw(&key("levels")) {
            self.levels = if v == "auto" {
                None
            } else {
                Some(v.parse().map_err(|_| Error::Config(format!("`levels`: cannot parse `{v}`")))?)
            };
        }
        map.take_into(&key("sampling_rate"), &mut self.sampling_rate)?;
        if let Some(v) = map.take_raw(&key("sampler")) {
            self.sampler = SamplerMode::parse(&v)?;
        }
        map.take_bool(&key("share_du"), &mut self.share_du)?;
        map.take_bool(&key("use_bias"), &mut self.use_bias)?;
        if let Some(v) = map.take_raw(&key("attention")) {
            self.attention = AttentionKind::parse(&v)?;
        }
        map.take_into(&key("emb_dropout"), &mut self.emb_dropout)?;
        map.take_into(&key("att_dropout"), &mut self.att_dropout)?;
        map.take_into(&key("norm_eps"), &mut self.norm_eps)?;
        map.take_into(&key("init_seed"), &mut self.init_seed)?;
        map.take_into(&key("a_shift"), &mut self.a_shift)?;
        map.take_into(&key("a_scale"), &mut self.a_scale)?;
        map.take_into(&key("u_scale"), &mut self.u_scale)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams<T = Tensor> {
    pub norm1_gamma: T,
    pub norm1_beta: T,
    /// `[dim, heads·d_head]`, present only when the widths differ.
    pub w_in: Option<T>,
    pub mixer: MultipoleParams<T>,
    pub w_out: T,
    pub b_out: T,
    pub norm2_gamma: T,
    pub norm2_beta: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone)]
pub struct ModelParams<T = Tensor> {
    pub embed_w: T,
    pub embed_b: T,
    pub blocks: Vec<BlockParams<T>>,
    pub decode_w: T,
    pub decode_b: T,
}

fn linear(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Tensor {
    let mut r = rng::rng_from(rng::named_seed(seed, name));
    rng::normal_tensor(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), &mut r)
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, s) = (cfg.dim, cfg.init_seed);
        let mixer_cfg = MultipoleConfig {
            sampling_rate: cfg.sampling_rate,
            sampler: cfg.sampler,
            share_du: cfg.share_du,
            ..MultipoleConfig::default()
        };
        let blocks = (0..cfg.depth)
            .map(|i| {
                let p = format!("block{i}");
                Ok(BlockParams {
                    norm1_gamma: Tensor::full(&[d], 1.0),
                    norm1_beta: Tensor::zeros(&[d]),
                    w_in: (cfg.attn_dim() != d).then(|| linear(s, &format!("{p}.attn_in.w"), d, cfg.attn_dim())),
                    mixer: MultipoleParams::init(cfg.heads, cfg.d_head, cfg.use_bias, &mixer_cfg, s, &format!("{p}.mixer"))?,
                    w_out: linear(s, &format!("{p}.attn_out.w"), cfg.attn_dim(), d),
                    b_out: Tensor::zeros(&[d]),
                    norm2_gamma: Tensor::full(&[d], 1.0),
                    norm2_beta: Tensor::zeros(&[d]),
                    w1: linear(s, &format!("{p}.mlp.fc1.w"), d, cfg.mlp_dim),
                    b1: Tensor::zeros(&[cfg.mlp_dim]),
                    w2: linear(s, &format!("{p}.mlp.fc2.w"), cfg.mlp_dim, d),
                    b2: Tensor::zeros(&[d]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed_w: linear(s, "embed.w", 3, d),
            embed_b: Tensor::zeros(&[d]),
            blocks,
            decode_w: linear(s, "decode.w", d, 1),
            decode_b: Tensor::zeros(&[1]),
        })
    }
}

impl<T> ModelParams<T> {
    /// Visits every leaf with its qualified name, in registration order.
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(String, &'a T) -> U) -> ModelParams<U> {
        let embed_w = f("embed.w".into(), &self.embed_w);
        let embed_b = f("embed.b".into(), &self.embed_b);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let p = format!("block{i}");
                BlockParams {
                    norm1_gamma: f(format!("{p}.norm1.gamma"), &b.norm1_gamma),
                    norm1_beta: f(format!("{p}.norm1.beta"), &b.norm1_beta),
                    w_in: b.w_in.as_ref().map(|w| f(format!("{p}.attn_in.w"), w)),
                    mixer: b.mixer.map(&format!("{p}.mixer"), f),
                    w_out: f(format!("{p}.attn_out.w"), &b.w_out),
                    b_out: f(format!("{p}.attn_out.b"), &b.b_out),
                    norm2_gamma: f(format!("{p}.norm2.gamma"), &b.norm2_gamma),
                    norm2_beta: f(format!("{p}.norm2.beta"), &b.norm2_beta),
                    w1: f(format!("{p}.mlp.fc1.w"), &b.w1),
                    b1: f(format!("{p}.mlp.fc1.b"), &b.b1),
                    w2: f(format!("{p}.mlp.fc2.w"), &b.w2),
                    b2: f(format!("{p}.mlp.fc2.b"), &b.b2),
                }
            })
            .collect();
        ModelParams {
            embed_w,
            embed_b,
            blocks,
            decode_w: f("decode.w".into(), &self.decode_w),
            decode_b: f("decode.b".into(), &self.decode_b),
        }
    }

    /// Same order as [`ModelParams::map`].
    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T)) {
        f(&mut self.embed_w);
        f(&mut self.embed_b);
        for b in &mut self.blocks {
            f(&mut b.norm1_gamma);
            f(&mut b.norm1_beta);
            if let Some(w) = b.w_in.as_mut() {
                f(w);
            }
            b.mixer.for_each_mut(f);
            for t in [
                &mut b.w_out,
                &mut b.b_out,
                &mut b.norm2_gamma,
                &mut b.norm2_beta,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ] {
                f(t);
            }
        }
        f(&mut self.decode_w);
        f(&mut self.decode_b);
    }
}

impl ModelParams<Tensor> {
    /// Leaves with their names, in registration order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.map(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn bind(&self, g: &mut Graph) -> ModelParams<NodeId> {
        self.map(&mut |name, t| g.param(name, t.clone()))
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.map(&mut |_, t| n += t.numel());
        n
    }
}

/// Per-cell input channels `(x_i, y_j, (a_ij − shift) / scale)` with cell
/// centres `(i + ½) / n`, shape `[n, n, 3]`.
pub fn embed_input(a: &Field, shift: f64, scale: f64) -> Tensor {
    let n = a.n();
    let mut data = Vec::with_capacity(n * n * 3);
    for i in 0..n {
        for j in 0..n {
            data.extend_from_slice(&[Field::coord(n, i), Field::coord(n, j), (a.get(i, j) - shift) / scale]);
        }
    }
    Tensor::new(vec![n, n, 3], data).expect("embedding shape")
}

fn dropout(g: &mut Graph, x: NodeId, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = g.shape(x).to_vec();
    let mask = Tensor::from_fn(&shape, |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
    g.mul_const(x, mask)
}

#[derive(Debug, Clone)]
pub struct OperatorModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl OperatorModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Ok(Self { config, params })
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Builds the forward pass on `g` and returns the normalised prediction
    /// `u / u_scale` as an `[n, n]` node. Passing a generator enables dropout.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ModelParams<NodeId>,
        a: &Field,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let n = a.n();
        let mixer = cfg.mixer_config(n)?;
        let input = g.constant(embed_input(a, cfg.a_shift, cfg.a_scale));
        let h = g.matmul(input, p.embed_w)?;
        let mut h = g.add_bias(h, p.embed_b)?;
        h = dropout(g, h, cfg.emb_dropout, dropout_rng.as_deref_mut())?;
        for b in &p.blocks {
            let x = g.layer_norm(h, b.norm1_gamma, b.norm1_beta, cfg.norm_eps)?;
            let x = match b.w_in {
                Some(w) => g.matmul(x, w)?,
                None => x,
            };
            let att = multipole_attention(g, x, &b.mixer, &mixer)?;
            let y = g.matmul(att, b.w_out)?;
            let y = g.add_bias(y, b.b_out)?;
            let y = dropout(g, y, cfg.att_dropout, dropout_rng.as_deref_mut())?;
            h = g.add(h, y)?;

            let x = g.layer_norm(h, b.norm2_gamma, b.norm2_beta, cfg.norm_eps)?;
            let m = g.matmul(x, b.w1)?;
            let m = g.add_bias(m, b.b1)?;
            let m = g.gelu(m);
            let m = g.matmul(m, b.w2)?;
            let m = g.add_bias(m, b.b2)?;
            h = g.add(h, m)?;
        }
        let out = g.matmul(h, p.decode_w)?;
        let out = g.add_bias(out, p.decode_b)?;
        g.reshape(out, &[n, n])
    }

    /// Mean squared error in normalised units for one sample.
    pub fn sample_loss(
        &self,
        g: &mut Graph,
        p: &ModelParams<NodeId>,
        sample: &DarcySample,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        if sample.a.n() != sample.u.n() {
            return Err(Error::dim("sample_loss", "coefficient and solution grids differ"));
        }
        let pred = self.forward(g, p, &sample.a, dropout_rng)?;
        let target = sample.u.scaled(1.0 / self.config.u_scale).to_tensor();
        g.mse(pred, target)
    }

    /// Inference in physical units, dropout off.
    pub fn predict(&self, a: &Field) -> Result<Field> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let out = self.forward(&mut g, &p, a, None)?;
        Ok(Field::from_tensor(g.value(out))?.scaled(self.config.u_scale))
    }
}

/// Mean sample loss over a fixed set, for gradient verification.
pub struct SupervisedObjective {
    pub model: OperatorModel,
    pub samples: Vec<DarcySample>,
}

impl Differentiable for SupervisedObjective {
    fn loss(&self, g: &mut Graph) -> Result<NodeId> {
        let p = self.model.params.bind(g);
        let mut total: Option<NodeId> = None;
        for s in &self.samples {
            let l = self.model.sample_loss(g, &p, s, None)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let total = total.ok_or_else(|| Error::Contract("objective needs at least one sample".into()))?;
        Ok(g.scale(total, 1.0 / self.samples.len() as f64))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.model.params.for_each_mut(&mut |t| out.push(t));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::darcy::{generate_sample, sample_coefficient, CoefficientSpec};
    use crate::gradcheck::{grad_check, GradCheckConfig};

    fn tiny(kind: AttentionKind) -> ModelConfig {
        ModelConfig {
            dim: 4,
            depth: 1,
            heads: 2,
            d_head: 2,
            mlp_dim: 6,
            emb_dropout: 0.0,
            att_dropout: 0.0,
            attention: kind,
            init_seed: 3,
            a_shift: 7.5,
            a_scale: 4.5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn depth_zero_width_eight_has_41_parameters() {
        let cfg = ModelConfig {
            dim: 8,
            depth: 0,
            heads: 2,
            d_head: 4,
            ..ModelConfig::default()
        };
        assert_eq!(OperatorModel::new(cfg).unwrap().count_params(), 41);
    }

    #[test]
    fn depth_zero_is_affine_in_the_coefficient() {
        let cfg = ModelConfig {
            depth: 0,
            dim: 8,
            heads: 2,
            d_head: 4,
            ..ModelConfig::default()
        };
        let m = OperatorModel::new(cfg).unwrap();
        let a1 = sample_coefficient(8, 1, 3.0, 12.0).unwrap();
        let a2 = sample_coefficient(8, 2, 3.0, 12.0).unwrap();
        let mid = Field::new(8, a1.values().iter().zip(a2.values()).map(|(x, y)| 0.5 * (x + y)).collect()).unwrap();
        let (p1, p2, pm) = (m.predict(&a1).unwrap(), m.predict(&a2).unwrap(), m.predict(&mid).unwrap());
        for c in 0..64 {
            let expected = 0.5 * (p1.values()[c] + p2.values()[c]);
            assert!((pm.values()[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_uses_cell_centres() {
        let a = Field::new(2, vec![3.0, 12.0, 12.0, 3.0]).unwrap();
        let e = embed_input(&a, 3.0, 9.0);
        assert_eq!(e.shape(), &[2, 2, 3]);
        assert_eq!(&e.data()[..6], &[0.25, 0.25, 0.0, 0.25, 0.75, 1.0]);
        assert_eq!(&e.data()[6..9], &[0.75, 0.25, 1.0]);
    }

    #[test]
    fn dense_matches_single_full_window_multipole() {
        let a = sample_coefficient(4, 9, 3.0, 12.0).unwrap();
        let dense = OperatorModel::new(tiny(AttentionKind::Dense)).unwrap();
        let mut cfg = tiny(AttentionKind::Multipole);
        cfg.levels = Some(0);
        cfg.window = 4;
        cfg.window_stride = 4;
        let multi = OperatorModel::new(cfg).unwrap();
        assert_eq!(dense.predict(&a).unwrap(), multi.predict(&a).unwrap());
    }

    #[test]
    fn parameter_count_ignores_hierarchy_depth_and_kind() {
        let counts: Vec<usize> = [Some(1), Some(2), Some(3), None]
            .into_iter()
            .map(|levels| {
                let cfg = ModelConfig {
                    levels,
                    ..tiny(AttentionKind::Multipole)
                };
                OperatorModel::new(cfg).unwrap().count_params()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]), "{counts:?}");
        for kind in [AttentionKind::Windowed, AttentionKind::Dense] {
            assert_eq!(OperatorModel::new(tiny(kind)).unwrap().count_params(), counts[0]);
        }
    }

    #[test]
    fn levels_are_clamped_to_the_grid() {
        let cfg = ModelConfig {
            levels: Some(9),
            ..tiny(AttentionKind::Multipole)
        };
        assert_eq!(cfg.mixer_config(8).unwrap().levels, 2);
        assert_eq!(cfg.mixer_config(32).unwrap().levels, 4);
        assert_eq!(tiny(AttentionKind::Windowed).mixer_config(32).unwrap().levels, 0);
        assert!(cfg.mixer_config(1).is_err());
    }

    #[test]
    fn one_set_of_weights_runs_at_every_resolution() {
        let m = OperatorModel::new(tiny(AttentionKind::Multipole)).unwrap();
        for n in [8, 16, 32] {
            let a = sample_coefficient(n, n as u64, 3.0, 12.0).unwrap();
            let u = m.predict(&a).unwrap();
            assert_eq!(u.n(), n);
            assert!(u.values().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn eval_is_deterministic_and_dropout_only_acts_in_training() {
        let cfg = ModelConfig {
            emb_dropout: 0.3,
            att_dropout: 0.3,
            ..tiny(AttentionKind::Multipole)
        };
        let m = OperatorModel::new(cfg).unwrap();
        let a = sample_coefficient(8, 5, 3.0, 12.0).unwrap();
        assert_eq!(m.predict(&a).unwrap(), m.predict(&a).unwrap());
        let train = |seed: u64| {
            let mut g = Graph::new();
            let p = m.params.bind(&mut g);
            let mut r = rng::rng_from(seed);
            let out = m.forward(&mut g, &p, &a, Some(&mut r)).unwrap();
            g.value(out).clone()
        };
        assert_eq!(train(1), train(1));
        assert_ne!(train(1), train(2));
        assert_ne!(train(1).data(), m.predict(&a).unwrap().scaled(1.0).values());
    }

    #[test]
    fn names_are_unique_and_traversals_agree() {
        let mut m = OperatorModel::new(tiny(AttentionKind::Multipole)).unwrap();
        let named: Vec<(String, Vec<usize>)> =
            m.params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let mut names: Vec<&String> = named.iter().map(|(n, _)| n).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), named.len());
        let mut shapes = Vec::new();
        m.params.for_each_mut(&mut |t| shapes.push(t.shape().to_vec()));
        assert_eq!(shapes, named.iter().map(|(_, s)| s.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn config_roundtrips_through_text() {
        let cfg = ModelConfig {
            levels: Some(2),
            a_shift: 0.1 + 0.2,
            sampler: SamplerMode::AveragePool,
            attention: AttentionKind::Windowed,
            ..ModelConfig::default()
        };
        let mut map = KvMap::new();
        cfg.write_kv(&mut map, "model.");
        let mut parsed = KvMap::parse(&map.render()).unwrap();
        let mut back = ModelConfig::default();
        back.read_kv(&mut parsed, "model.").unwrap();
        parsed.finish().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn mismatched_widths_use_an_input_projection() {
        let cfg = ModelConfig {
            dim: 6,
            ..tiny(AttentionKind::Multipole)
        };
        let m = OperatorModel::new(cfg).unwrap();
        assert_eq!(m.params.blocks[0].w_in.as_ref().unwrap().shape(), &[6, 4]);
        m.predict(&sample_coefficient(8, 0, 3.0, 12.0).unwrap()).unwrap();
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let spec = CoefficientSpec::default();
        let samples = vec![generate_sample(4, 1, &spec).unwrap(), generate_sample(4, 2, &spec).unwrap()];
        for kind in [AttentionKind::Multipole, AttentionKind::Windowed] {
            let mut cfg = tiny(kind);
            cfg.u_scale = 0.01;
            let mut obj = SupervisedObjective {
                model: OperatorModel::new(cfg).unwrap(),
                samples: samples.clone(),
            };
            let report = grad_check(&mut obj, &GradCheckConfig::default()).unwrap();
            assert!(report.passed(), "{kind}: worst {:e} {:?}", report.worst(), report.params);
        }
    }
}
