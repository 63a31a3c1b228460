//! Raw numeric kernels on row-major slices.
//!
//! Feature maps are laid out `[height, width, channels]`. Convolution kernels
//! are `[k, k, c_in, c_out]` for [`conv2d_forward`] and `[k, k, c_out, c_in]`
//! for [`conv_transpose2d_forward`], so the same kernel tensor makes the two
//! operators adjoint to each other.

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&a_ip, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if a_ip == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

/// `g[m×n] · bᵀ`, the gradient of a matmul with respect to its left operand.
pub fn matmul_grad_lhs(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for (g_row, out_row) in g.chunks_exact(n).zip(out.chunks_exact_mut(k)) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(n)) {
            *o = dot(g_row, b_row);
        }
    }
    out
}

/// `aᵀ · g[m×n]`, the gradient of a matmul with respect to its right operand.
pub fn matmul_grad_rhs(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for (a_row, g_row) in a.chunks_exact(k).zip(g.chunks_exact(n)).take(m) {
        for (&a_ip, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            if a_ip == 0.0 {
                continue;
            }
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += a_ip * gv;
            }
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Spatial geometry shared by the convolution kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Geometry of a strided convolution; `None` when the kernel does not fit.
    pub fn conv(in_h: usize, in_w: usize, kernel: usize, stride: usize, padding: usize) -> Option<Self> {
        if kernel == 0 || stride == 0 {
            return None;
        }
        let (ph, pw) = (in_h + 2 * padding, in_w + 2 * padding);
        if ph < kernel || pw < kernel {
            return None;
        }
        Some(Self {
            in_h,
            in_w,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
            kernel,
            stride,
            padding,
        })
    }

    /// Geometry of a transposed convolution mapping `in_h × in_w` upwards.
    pub fn transpose(in_h: usize, in_w: usize, kernel: usize, stride: usize, padding: usize) -> Option<Self> {
        if kernel == 0 || stride == 0 {
            return None;
        }
        let full_h = (in_h - 1) * stride + kernel;
        let full_w = (in_w - 1) * stride + kernel;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return None;
        }
        Some(Self {
            in_h,
            in_w,
            out_h: full_h - 2 * padding,
            out_w: full_w - 2 * padding,
            kernel,
            stride,
            padding,
        })
    }

    /// Position in the (unpadded) large grid touched by tap `(a, b)` of the
    /// small-grid position `(i, j)`, or `None` if it falls into the padding.
    #[inline]
    fn tap(&self, i: usize, j: usize, a: usize, b: usize, large_h: usize, large_w: usize) -> Option<(usize, usize)> {
        let y = (i * self.stride + a).checked_sub(self.padding)?;
        let x = (j * self.stride + b).checked_sub(self.padding)?;
        (y < large_h && x < large_w).then_some((y, x))
    }
}

/// Cross-correlation: `out[o, co] = Σ x[o·s + tap − p, ci] · kernel[tap, ci, co]`.
pub fn conv2d_forward(x: &[f64], kernel: &[f64], geo: &ConvGeometry, c_in: usize, c_out: usize) -> Vec<f64> {
    let k = geo.kernel;
    let mut out = vec![0.0; geo.out_h * geo.out_w * c_out];
    for oi in 0..geo.out_h {
        for oj in 0..geo.out_w {
            let o = (oi * geo.out_w + oj) * c_out;
            let out_px = &mut out[o..o + c_out];
            for a in 0..k {
                for b in 0..k {
                    let Some((y, xx)) = geo.tap(oi, oj, a, b, geo.in_h, geo.in_w) else {
                        continue;
                    };
                    let in_px = &x[(y * geo.in_w + xx) * c_in..][..c_in];
                    let taps = &kernel[(a * k + b) * c_in * c_out..][..c_in * c_out];
                    for (&xv, k_row) in in_px.iter().zip(taps.chunks_exact(c_out)) {
                        axpy(xv, k_row, out_px);
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input and kernel.
pub fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    geo: &ConvGeometry,
    c_in: usize,
    c_out: usize,
) -> (Vec<f64>, Vec<f64>) {
    let k = geo.kernel;
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kernel.len()];
    for oi in 0..geo.out_h {
        for oj in 0..geo.out_w {
            let g_px = &grad_out[(oi * geo.out_w + oj) * c_out..][..c_out];
            for a in 0..k {
                for b in 0..k {
                    let Some((y, xx)) = geo.tap(oi, oj, a, b, geo.in_h, geo.in_w) else {
                        continue;
                    };
                    let base = (y * geo.in_w + xx) * c_in;
                    let tap_off = (a * k + b) * c_in * c_out;
                    for ci in 0..c_in {
                        let k_row = &kernel[tap_off + ci * c_out..][..c_out];
                        gx[base + ci] += dot(g_px, k_row);
                        let xv = x[base + ci];
                        axpy(xv, g_px, &mut gk[tap_off + ci * c_out..][..c_out]);
                    }
                }
            }
        }
    }
    (gx, gk)
}

/// Transposed convolution: `out[i·s + tap − p, co] += x[i, ci] · kernel[tap, co, ci]`.
pub fn conv_transpose2d_forward(
    x: &[f64],
    kernel: &[f64],
    geo: &ConvGeometry,
    c_in: usize,
    c_out: usize,
) -> Vec<f64> {
    let k = geo.kernel;
    let mut out = vec![0.0; geo.out_h * geo.out_w * c_out];
    for i in 0..geo.in_h {
        for j in 0..geo.in_w {
            let in_px = &x[(i * geo.in_w + j) * c_in..][..c_in];
            for a in 0..k {
                for b in 0..k {
                    let Some((y, xx)) = geo.tap(i, j, a, b, geo.out_h, geo.out_w) else {
                        continue;
                    };
                    let o = (y * geo.out_w + xx) * c_out;
                    let taps = &kernel[(a * k + b) * c_out * c_in..][..c_out * c_in];
                    for (co, k_row) in taps.chunks_exact(c_in).enumerate() {
                        out[o + co] += dot(in_px, k_row);
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv_transpose2d_forward`] with respect to input and kernel.
pub fn conv_transpose2d_backward(
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    geo: &ConvGeometry,
    c_in: usize,
    c_out: usize,
) -> (Vec<f64>, Vec<f64>) {
    let k = geo.kernel;
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kernel.len()];
    for i in 0..geo.in_h {
        for j in 0..geo.in_w {
            let base = (i * geo.in_w + j) * c_in;
            for a in 0..k {
                for b in 0..k {
                    let Some((y, xx)) = geo.tap(i, j, a, b, geo.out_h, geo.out_w) else {
                        continue;
                    };
                    let g_px = &grad_out[(y * geo.out_w + xx) * c_out..][..c_out];
                    let tap_off = (a * k + b) * c_out * c_in;
                    for (co, &g) in g_px.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let row = tap_off + co * c_in;
                        axpy(g, &kernel[row..row + c_in], &mut gx[base..base + c_in]);
                        axpy(g, &x[base..base + c_in], &mut gk[row..row + c_in]);
                    }
                }
            }
        }
    }
    (gx, gk)
}

/// `k×k` mean pooling with stride `k` on a `[h, w, c]` map.
pub fn avg_pool(x: &[f64], h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; oh * ow * c];
    for i in 0..oh * k {
        for j in 0..ow * k {
            let src = &x[(i * w + j) * c..][..c];
            let dst = &mut out[((i / k) * ow + j / k) * c..][..c];
            axpy(inv, src, dst);
        }
    }
    out
}

/// Nearest-neighbour replication by a factor `k` on a `[h, w, c]` map.
pub fn nearest_upsample(x: &[f64], h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h * k, w * k);
    let mut out = vec![0.0; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            let src = &x[((i / k) * w + j / k) * c..][..c];
            out[(i * ow + j) * c..][..c].copy_from_slice(src);
        }
    }
    out
}

/// Adjoint of [`nearest_upsample`]: sums each `k×k` block.
pub fn block_sum(g: &[f64], oh: usize, ow: usize, c: usize, k: usize) -> Vec<f64> {
    let (h, w) = (oh / k, ow / k);
    let mut out = vec![0.0; h * w * c];
    for i in 0..oh {
        for j in 0..ow {
            let src = &g[(i * ow + j) * c..][..c];
            let dst = &mut out[((i / k) * w + j / k) * c..][..c];
            axpy(1.0, src, dst);
        }
    }
    out
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}
