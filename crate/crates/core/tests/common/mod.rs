//! Straight-line reference implementations used as oracles. Nothing here
//! calls into the library's numeric kernels.
#![allow(dead_code)]

use mano::multipole::{MultipoleConfig, MultipoleParams, SamplerMode};
use mano::rng::{normal_tensor, rng_from};
use mano::{Graph, Tensor};

/// Row-wise layer norm with biased variance.
pub fn layer_norm(x: &[f64], d: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / d {
        let row = &x[r * d..(r + 1) * d];
        let mut mean = 0.0;
        for &v in row {
            mean += v;
        }
        mean /= d as f64;
        let mut var = 0.0;
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var /= d as f64;
        for c in 0..d {
            out[r * d + c] = (row[c] - mean) / (var + eps).sqrt() * gamma[c] + beta[c];
        }
    }
    out
}

/// `y = x W + b` for one token, `W` stored row-major `[d_in, d_out]`.
fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, d_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; d_out];
    for c in 0..d_out {
        let mut s = b.map_or(0.0, |b| b[c]);
        for (r, &xr) in x.iter().enumerate() {
            s += xr * w[r * d_out + c];
        }
        y[c] = s;
    }
    y
}

/// Multi-head sliding-window attention on an `h × w` grid of width `d`,
/// written as explicit loops over windows, query tokens and key tokens.
pub fn windowed_attention(
    x: &[f64],
    h: usize,
    w: usize,
    p: &MultipoleParams,
    window: usize,
    stride: usize,
    normalize: bool,
) -> Vec<f64> {
    let dh = p.attention.d_head;
    let heads = p.attention.heads.len();
    let d = dh * heads;
    let mut out = vec![0.0; h * w * d];
    let mut cover = vec![0usize; h * w];
    let scale = 1.0 / (dh as f64).sqrt();
    let mut wi = 0;
    while wi + window <= h {
        let mut wj = 0;
        while wj + window <= w {
            let tokens: Vec<usize> = (0..window)
                .flat_map(|a| (0..window).map(move |b| (wi + a) * w + wj + b))
                .collect();
            for &t in &tokens {
                cover[t] += 1;
            }
            for (hh, hp) in p.attention.heads.iter().enumerate() {
                let slice = |t: usize| &x[t * d + hh * dh..t * d + (hh + 1) * dh];
                let proj = |t: usize, wm: &Tensor, b: &Option<Tensor>| {
                    affine(slice(t), wm.data(), b.as_ref().map(|b| b.data()), dh)
                };
                let q: Vec<Vec<f64>> = tokens.iter().map(|&t| proj(t, &hp.w_q, &hp.b_q)).collect();
                let k: Vec<Vec<f64>> = tokens.iter().map(|&t| proj(t, &hp.w_k, &hp.b_k)).collect();
                let v: Vec<Vec<f64>> = tokens.iter().map(|&t| proj(t, &hp.w_v, &hp.b_v)).collect();
                for (i, &ti) in tokens.iter().enumerate() {
                    let mut s: Vec<f64> = k
                        .iter()
                        .map(|kj| q[i].iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for e in s.iter_mut() {
                        *e = (*e - m).exp();
                        z += *e;
                    }
                    for (j, vj) in v.iter().enumerate() {
                        let a = s[j] / z;
                        for c in 0..dh {
                            out[ti * d + hh * dh + c] += a * vj[c];
                        }
                    }
                }
            }
            wj += stride;
        }
        wi += stride;
    }
    if normalize {
        for t in 0..h * w {
            for c in 0..d {
                out[t * d + c] /= cover[t] as f64;
            }
        }
    }
    out
}

/// Unpadded cross-correlation, kernel `[k, k, c_in, c_out]`.
pub fn conv2d(x: &[f64], h: usize, w: usize, c_in: usize, kernel: &[f64], k: usize, c_out: usize, s: usize) -> Vec<f64> {
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut out = vec![0.0; oh * ow * c_out];
    for i in 0..oh {
        for j in 0..ow {
            for co in 0..c_out {
                let mut acc = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        for ci in 0..c_in {
                            acc += x[((i * s + a) * w + j * s + b) * c_in + ci]
                                * kernel[((a * k + b) * c_in + ci) * c_out + co];
                        }
                    }
                }
                out[(i * ow + j) * c_out + co] = acc;
            }
        }
    }
    out
}

/// Unpadded transposed convolution, kernel `[k, k, c_out, c_in]`.
pub fn conv_transpose2d(
    x: &[f64],
    h: usize,
    w: usize,
    c_in: usize,
    kernel: &[f64],
    k: usize,
    c_out: usize,
    s: usize,
) -> Vec<f64> {
    let (oh, ow) = ((h - 1) * s + k, (w - 1) * s + k);
    let mut out = vec![0.0; oh * ow * c_out];
    for i in 0..h {
        for j in 0..w {
            for a in 0..k {
                for b in 0..k {
                    for co in 0..c_out {
                        for ci in 0..c_in {
                            out[((i * s + a) * ow + j * s + b) * c_out + co] +=
                                x[(i * w + j) * c_in + ci] * kernel[((a * k + b) * c_out + co) * c_in + ci];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Applies `f` to each head's channel slice and reassembles the full width.
fn per_head(
    x: &[f64],
    h: usize,
    w: usize,
    dh: usize,
    heads: usize,
    mut f: impl FnMut(usize, &[f64]) -> (Vec<f64>, usize, usize),
) -> (Vec<f64>, usize, usize) {
    let d = dh * heads;
    let mut parts = Vec::new();
    let (mut oh, mut ow) = (0, 0);
    for hh in 0..heads {
        let mut slice = vec![0.0; h * w * dh];
        for t in 0..h * w {
            slice[t * dh..(t + 1) * dh].copy_from_slice(&x[t * d + hh * dh..t * d + (hh + 1) * dh]);
        }
        let (y, a, b) = f(hh, &slice);
        oh = a;
        ow = b;
        parts.push(y);
    }
    let mut out = vec![0.0; oh * ow * d];
    for (hh, part) in parts.iter().enumerate() {
        for t in 0..oh * ow {
            out[t * d + hh * dh..t * d + (hh + 1) * dh].copy_from_slice(&part[t * dh..(t + 1) * dh]);
        }
    }
    (out, oh, ow)
}

/// The V-cycle unrolled: normalise and attend at every level on the way
/// down, then upsample the coarsest result and add it level by level.
pub fn multipole_attention(x: &[f64], n: usize, p: &MultipoleParams, cfg: &MultipoleConfig) -> Vec<f64> {
    let dh = p.attention.d_head;
    let heads = p.attention.heads.len();
    let d = dh * heads;
    let k = cfg.sampling_rate;
    let (g, b) = (p.norm_gamma.data(), p.norm_beta.data());
    let mut levels = Vec::new();
    let mut cur = x.to_vec();
    let mut side = n;
    for l in 0..=cfg.levels {
        if l > 0 {
            cur = match cfg.sampler {
                SamplerMode::AveragePool => {
                    let s = side / k;
                    let mut y = vec![0.0; s * s * d];
                    for i in 0..side {
                        for j in 0..side {
                            for c in 0..d {
                                y[((i / k) * s + j / k) * d + c] += cur[(i * side + j) * d + c] / (k * k) as f64;
                            }
                        }
                    }
                    y
                }
                SamplerMode::LearnedConv => {
                    per_head(&cur, side, side, dh, heads, |hh, xs| {
                        let o = (side - k) / cfg.down_stride + 1;
                        (conv2d(xs, side, side, dh, p.down[hh].data(), k, dh, cfg.down_stride), o, o)
                    })
                    .0
                }
            };
            side /= k;
        }
        let normed = layer_norm(&cur, d, g, b, cfg.norm_eps);
        levels.push((
            windowed_attention(&normed, side, side, p, cfg.window.window, cfg.window.stride, cfg.window.normalize_coverage),
            side,
        ));
    }
    let (mut acc, mut side) = levels.pop().unwrap();
    while let Some((finer, fside)) = levels.pop() {
        let up = match cfg.sampler {
            SamplerMode::AveragePool => {
                let mut y = vec![0.0; fside * fside * d];
                for i in 0..fside {
                    for j in 0..fside {
                        for c in 0..d {
                            y[(i * fside + j) * d + c] = acc[((i / k) * side + j / k) * d + c];
                        }
                    }
                }
                y
            }
            SamplerMode::LearnedConv => {
                let kernels = if cfg.share_du { &p.down } else { &p.up };
                per_head(&acc, side, side, dh, heads, |hh, xs| {
                    let o = (side - 1) * cfg.down_stride + k;
                    (conv_transpose2d(xs, side, side, dh, kernels[hh].data(), k, dh, cfg.down_stride), o, o)
                })
                .0
            }
        };
        acc = finer.iter().zip(&up).map(|(a, b)| a + b).collect();
        side = fside;
    }
    acc
}

/// Parameters with every leaf perturbed away from its structured init, so
/// biases and norm parameters are exercised too.
pub fn random_params(heads: usize, d_head: usize, cfg: &MultipoleConfig, seed: u64) -> MultipoleParams {
    let mut p = MultipoleParams::init(heads, d_head, true, cfg, seed, "mixer").unwrap();
    let mut rng = rng_from(seed ^ 0x5eed);
    p.for_each_mut(&mut |t: &mut Tensor| {
        let noise = normal_tensor(t.shape(), 0.3, &mut rng);
        for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    });
    p
}

/// Runs the library's multipole layer on `x` viewed as `[n, n, d]`.
pub fn library_multipole(x: &Tensor, p: &MultipoleParams, cfg: &MultipoleConfig) -> Tensor {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let pn = p.map("mixer", &mut |name, t| g.param(name, t.clone()));
    let y = mano::multipole::multipole_attention(&mut g, xn, &pn, cfg).unwrap();
    g.value(y).clone()
}

/// AdamW written out per scalar: decay, moments, bias correction, step.
pub struct ReferenceAdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub wd: f64,
    pub t: i32,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl ReferenceAdamW {
    pub fn new(len: usize, lr: f64, wd: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            wd,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        for i in 0..theta.len() {
            theta[i] -= self.lr * self.wd * theta[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / (1.0 - self.beta1.powi(self.t));
            let vhat = self.v[i] / (1.0 - self.beta2.powi(self.t));
            theta[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
