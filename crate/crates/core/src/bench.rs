//! Scaling measurements of the three attention variants: median wall time,
//! analytic operation counts and arena bytes for one forward pass.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::attention::{attention_flops, full_attention, windowed_flops, WindowSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::AttentionKind;
use crate::multipole::{multipole_attention, multipole_flops, MultipoleConfig, MultipoleParams};
use crate::rng;
use crate::tensor::Tensor;

pub const BENCH_HEADER: &str = "variant,n,N,wall_ns_median,flops,peak_bytes";

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub variants: Vec<AttentionKind>,
    pub sizes: Vec<usize>,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub window_stride: usize,
    /// Timed repeats, at least 5.
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Dense attention is skipped above this grid side.
    pub dense_max_n: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            variants: vec![AttentionKind::Dense, AttentionKind::Windowed, AttentionKind::Multipole],
            sizes: vec![16, 32, 64, 128],
            dim: 32,
            heads: 2,
            window: 2,
            window_stride: 1,
            repeats: 5,
            warmup: 1,
            seed: 0,
            dense_max_n: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub variant: AttentionKind,
    pub n: usize,
    pub tokens: usize,
    pub wall_ns_median: u64,
    pub flops: u64,
    /// Query-key score term of `flops`.
    pub score_flops: u64,
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, Default)]
pub struct BenchReport {
    pub run_id: String,
    pub records: Vec<BenchRecord>,
    pub notes: Vec<String>,
}

impl BenchConfig {
    fn window_spec(&self) -> Result<WindowSpec> {
        WindowSpec::new(self.window, self.window_stride)
    }

    /// Multipole configuration at side `n`: deepest hierarchy that fits.
    pub fn multipole_config(&self, n: usize) -> Result<MultipoleConfig> {
        let levels = MultipoleConfig::max_levels(n, 2, self.window);
        let cfg = MultipoleConfig {
            levels,
            window: self.window_spec()?,
            ..MultipoleConfig::default()
        };
        cfg.level_shapes(n, n)?;
        Ok(cfg)
    }

    fn d_head(&self) -> Result<usize> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "bench width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(self.dim / self.heads)
    }

    /// `(total, score term)` operation counts for one forward pass.
    pub fn analytic_flops(&self, variant: AttentionKind, n: usize) -> Result<(u64, u64)> {
        let (tokens, d, h) = ((n * n) as u64, self.dim as u64, self.heads as u64);
        Ok(match variant {
            AttentionKind::Dense => {
                let c = attention_flops(tokens, tokens, d, h);
                (c.total(), c.scores)
            }
            AttentionKind::Windowed => {
                let c = windowed_flops(tokens, &self.window_spec()?, d, h);
                (c.total(), c.scores)
            }
            AttentionKind::Multipole => {
                let c = multipole_flops(n, n, self.dim, self.heads, &self.multipole_config(n)?)?;
                (c.total(), c.attention.scores)
            }
        })
    }
}

fn forward(
    g: &mut Graph,
    variant: AttentionKind,
    x: &Tensor,
    params: &MultipoleParams,
    cfg: &MultipoleConfig,
) -> Result<NodeId> {
    let p = params.map("bench", &mut |name, t| g.param(name, t.clone()));
    let xn = g.constant(x.clone());
    match variant {
        AttentionKind::Dense => full_attention(g, xn, &p.attention),
        AttentionKind::Windowed => multipole_attention(g, xn, &p, &MultipoleConfig { levels: 0, ..cfg.clone() }),
        AttentionKind::Multipole => multipole_attention(g, xn, &p, cfg),
    }
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    v[v.len() / 2]
}

/// Times every `(variant, size)` pair; records are sorted by `(variant, n)`.
pub fn run_scaling(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats < 5 {
        return Err(Error::Config(format!("at least 5 timed repeats are required, got {}", cfg.repeats)));
    }
    if cfg.sizes.is_empty() || cfg.variants.is_empty() {
        return Err(Error::Config("bench needs at least one size and one variant".into()));
    }
    for &n in &cfg.sizes {
        if !n.is_power_of_two() || n < cfg.window {
            return Err(Error::Config(format!(
                "bench size {n} must be a power of two no smaller than window {}",
                cfg.window
            )));
        }
    }
    let d_head = cfg.d_head()?;
    let base = cfg.multipole_config(*cfg.sizes.iter().min().unwrap())?;
    let params = MultipoleParams::init(cfg.heads, d_head, true, &base, rng::named_seed(cfg.seed, "bench.params"), "bench")?;

    let mut variants = cfg.variants.clone();
    variants.sort_by_key(|v| v.as_str());
    variants.dedup();
    let mut sizes = cfg.sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();

    let mut report = BenchReport {
        run_id: format!(
            "seed={} dim={} heads={} window={} stride={} repeats={}",
            cfg.seed, cfg.dim, cfg.heads, cfg.window, cfg.window_stride, cfg.repeats
        ),
        ..BenchReport::default()
    };
    for &variant in &variants {
        for &n in &sizes {
            if variant == AttentionKind::Dense && n > cfg.dense_max_n {
                report
                    .notes
                    .push(format!("dense skipped at n={n} (above cap {})", cfg.dense_max_n));
                continue;
            }
            let mcfg = cfg.multipole_config(n)?;
            let mut r = rng::rng_from(rng::indexed_seed(rng::named_seed(cfg.seed, "bench.input"), n as u64));
            let x = rng::normal_tensor(&[n, n, cfg.dim], 1.0, &mut r);
            let mut peak = 0;
            for _ in 0..cfg.warmup {
                let mut g = Graph::new();
                forward(&mut g, variant, &x, &params, &mcfg)?;
                peak = g.bytes_allocated();
            }
            let mut times = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let mut g = Graph::new();
                let t = Instant::now();
                forward(&mut g, variant, &x, &params, &mcfg)?;
                times.push(t.elapsed().as_nanos() as u64);
                peak = g.bytes_allocated();
            }
            let (flops, score_flops) = cfg.analytic_flops(variant, n)?;
            report.records.push(BenchRecord {
                variant,
                n,
                tokens: n * n,
                wall_ns_median: median(times),
                flops,
                score_flops,
                peak_bytes: peak,
            });
        }
    }
    Ok(report)
}

impl BenchReport {
    /// Run-id comment line, column header, one row per record.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# run {}\n{BENCH_HEADER}\n", self.run_id);
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.variant, r.n, r.tokens, r.wall_ns_median, r.flops, r.peak_bytes
            ));
        }
        s
    }

    /// Appends this run as one contiguous block.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Numerical("log-log fit needs at least two positive points".into()));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Numerical("log-log fit needs at least two distinct sizes".into()));
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFit {
    pub variant: AttentionKind,
    pub flops_slope: f64,
    pub score_slope: f64,
    pub wall_slope: f64,
}

/// Per-variant slopes against `N`; each variant needs at least three sizes.
pub fn fit_scaling_exponent(records: &[BenchRecord]) -> Result<Vec<ScalingFit>> {
    let mut variants: Vec<AttentionKind> = records.iter().map(|r| r.variant).collect();
    variants.sort_by_key(|v| v.as_str());
    variants.dedup();
    variants
        .into_iter()
        .map(|variant| {
            let rs: Vec<&BenchRecord> = records.iter().filter(|r| r.variant == variant).collect();
            if rs.len() < 3 {
                return Err(Error::Config(format!(
                    "{variant}: {} sizes recorded, a fit needs at least 3",
                    rs.len()
                )));
            }
            let fit = |f: &dyn Fn(&BenchRecord) -> f64| {
                log_log_slope(&rs.iter().map(|r| (r.tokens as f64, f(r))).collect::<Vec<_>>())
            };
            Ok(ScalingFit {
                variant,
                flops_slope: fit(&|r| r.flops as f64)?,
                score_slope: fit(&|r| r.score_flops as f64)?,
                wall_slope: fit(&|r| r.wall_ns_median as f64)?,
            })
        })
        .collect()
}
