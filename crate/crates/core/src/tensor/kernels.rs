//! Forward and backward kernels over raw slices.
//!
//! Convolutions lower to im2col plus a single-threaded `sgemm`, which keeps
//! every run bitwise reproducible.

use rand::Rng;

use super::{Result, TensorError};

/// Batch-norm variance stabilizer.
pub const BN_EPSILON: f32 = 1e-5;
/// Running statistics keep this fraction of their previous value per update.
pub const BN_MOMENTUM: f32 = 0.99;
/// Initial PReLU slope for negative inputs.
pub const PRELU_INIT: f32 = 0.25;

/// Geometry of a square 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl ConvSpec {
    /// 3x3 convolution whose output keeps the input's spatial size.
    pub fn same(in_channels: usize, out_channels: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
            dilation,
            stride: 1,
            padding: dilation,
            transposed: false,
        }
    }

    /// 1x1 channel projection.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 1,
            dilation: 1,
            stride: 1,
            padding: 0,
            transposed: false,
        }
    }

    /// Kernel-2 stride-2 transposed convolution that doubles height and width.
    pub fn upsample(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 2,
            dilation: 1,
            stride: 2,
            padding: 0,
            transposed: true,
        }
    }

    /// Side length of the input window one output element reads.
    pub fn dilated_kernel(&self) -> usize {
        self.kernel + (self.kernel - 1) * (self.dilation - 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        if self.transposed {
            [self.in_channels, self.out_channels, self.kernel, self.kernel]
        } else {
            [self.out_channels, self.in_channels, self.kernel, self.kernel]
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.transposed {
            return Ok((h * self.stride, w * self.stride));
        }
        let field = self.dilated_kernel();
        let out = |len: usize, axis: &str| {
            let padded = len + 2 * self.padding;
            if padded < field || self.stride == 0 {
                Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    dim: format!("{axis} (padded extent vs dilated kernel)"),
                    expected: field,
                    actual: padded,
                })
            } else {
                Ok((padded - field) / self.stride + 1)
            }
        };
        Ok((out(h, "height")?, out(w, "width")?))
    }

    pub(crate) fn validate(&self, op: &'static str) -> Result<()> {
        let unsupported = |reason: &str| {
            Err(TensorError::Unsupported {
                op,
                reason: reason.to_string(),
            })
        };
        if self.in_channels == 0 || self.out_channels == 0 {
            return unsupported("channel counts must be positive");
        }
        if self.kernel == 0 || self.dilation == 0 || self.stride == 0 {
            return unsupported("kernel, dilation and stride must be positive");
        }
        if self.transposed
            && (self.kernel != 2 || self.stride != 2 || self.padding != 0 || self.dilation != 1)
        {
            return unsupported("transposed convolution supports only kernel 2, stride 2, padding 0");
        }
        Ok(())
    }
}

/// `c = beta * c + op(a) * op(b)`, all row-major.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted slice lengths cover every index the strides reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `[C, H, W]` image into a `(C*k*k) x (Ho*Wo)` column matrix.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, spec: &ConvSpec, ho: usize, wo: usize, cols: &mut [f32]) {
    let k = spec.kernel;
    let (s, d, p) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    let plane = ho * wo;
    for ch in 0..c {
        let img = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = ky as isize * d - p;
                let dx = kx as isize * d - p;
                for oy in 0..ho {
                    let iy = oy as isize * s + dy;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s + dx;
                        *slot = if ix >= 0 && ix < w as isize {
                            src[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, spec: &ConvSpec, ho: usize, wo: usize, gx: &mut [f32]) {
    let k = spec.kernel;
    let (s, d, p) = (spec.stride as isize, spec.dilation as isize, spec.padding as isize);
    let plane = ho * wo;
    for ch in 0..c {
        let img = &mut gx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = ky as isize * d - p;
                let dx = kx as isize * d - p;
                for oy in 0..ho {
                    let iy = oy as isize * s + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut img[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = ox as isize * s + dx;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == 1 && spec.stride == 1 && spec.padding == 0
}

pub(crate) fn conv2d_forward(
    x: &[f32],
    [n, c, h, w]: [usize; 4],
    weight: &[f32],
    bias: &[f32],
    spec: &ConvSpec,
) -> Result<(Vec<f32>, usize, usize)> {
    let (ho, wo) = spec.output_size(h, w)?;
    let co = spec.out_channels;
    let kk = c * spec.kernel * spec.kernel;
    let plane = ho * wo;
    let mut out = vec![0.0f32; n * co * plane];
    let mut cols = if is_pointwise(spec) {
        Vec::new()
    } else {
        vec![0.0f32; kk * plane]
    };
    for b in 0..n {
        let xb = &x[b * c * h * w..(b + 1) * c * h * w];
        let ob = &mut out[b * co * plane..(b + 1) * co * plane];
        for (oc, chunk) in ob.chunks_exact_mut(plane).enumerate() {
            chunk.fill(bias[oc]);
        }
        let cols_ref: &[f32] = if is_pointwise(spec) {
            xb
        } else {
            im2col(xb, c, h, w, spec, ho, wo, &mut cols);
            &cols
        };
        gemm(co, kk, plane, weight, false, cols_ref, false, 1.0, ob);
    }
    Ok((out, ho, wo))
}

pub(crate) struct ConvGrads {
    pub input: Vec<f32>,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn conv2d_backward(
    x: &[f32],
    [n, c, h, w]: [usize; 4],
    weight: &[f32],
    spec: &ConvSpec,
    grad_out: &[f32],
) -> Result<ConvGrads> {
    let (ho, wo) = spec.output_size(h, w)?;
    let co = spec.out_channels;
    let kk = c * spec.kernel * spec.kernel;
    let plane = ho * wo;
    let mut gx = vec![0.0f32; x.len()];
    let mut gw = vec![0.0f32; weight.len()];
    let mut gb = vec![0.0f64; co];
    let pointwise = is_pointwise(spec);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0f32; kk * plane] };
    let mut gcols = vec![0.0f32; kk * plane];
    for b in 0..n {
        let xb = &x[b * c * h * w..(b + 1) * c * h * w];
        let gb_out = &grad_out[b * co * plane..(b + 1) * co * plane];
        for (oc, chunk) in gb_out.chunks_exact(plane).enumerate() {
            gb[oc] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
        let cols_ref: &[f32] = if pointwise {
            xb
        } else {
            im2col(xb, c, h, w, spec, ho, wo, &mut cols);
            &cols
        };
        gemm(co, plane, kk, gb_out, false, cols_ref, true, 1.0, &mut gw);
        let gxb = &mut gx[b * c * h * w..(b + 1) * c * h * w];
        if pointwise {
            gemm(kk, co, plane, weight, true, gb_out, false, 1.0, gxb);
        } else {
            gemm(kk, co, plane, weight, true, gb_out, false, 0.0, &mut gcols);
            col2im(&gcols, c, h, w, spec, ho, wo, gxb);
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb.into_iter().map(|v| v as f32).collect(),
    })
}

/// Kernel-2 stride-2 transposed convolution; weight layout `[Ci, Co, 2, 2]`.
pub(crate) fn conv_transpose_forward(
    x: &[f32],
    [n, c, h, w]: [usize; 4],
    weight: &[f32],
    bias: &[f32],
    co: usize,
) -> Vec<f32> {
    let plane = h * w;
    let (ho, wo) = (2 * h, 2 * w);
    let taps = co * 4;
    let mut out = vec![0.0f32; n * co * ho * wo];
    let mut y = vec![0.0f32; taps * plane];
    for b in 0..n {
        let xb = &x[b * c * plane..(b + 1) * c * plane];
        gemm(taps, c, plane, weight, true, xb, false, 0.0, &mut y);
        let ob = &mut out[b * co * ho * wo..(b + 1) * co * ho * wo];
        for oc in 0..co {
            let dst = &mut ob[oc * ho * wo..(oc + 1) * ho * wo];
            for tap in 0..4 {
                let (a, bb) = (tap / 2, tap % 2);
                let src = &y[(oc * 4 + tap) * plane..(oc * 4 + tap + 1) * plane];
                for i in 0..h {
                    let row = &mut dst[(2 * i + a) * wo..(2 * i + a + 1) * wo];
                    for j in 0..w {
                        row[2 * j + bb] = src[i * w + j] + bias[oc];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose_backward(
    x: &[f32],
    [n, c, h, w]: [usize; 4],
    weight: &[f32],
    co: usize,
    grad_out: &[f32],
) -> ConvGrads {
    let plane = h * w;
    let (ho, wo) = (2 * h, 2 * w);
    let taps = co * 4;
    let mut gx = vec![0.0f32; x.len()];
    let mut gw = vec![0.0f32; weight.len()];
    let mut gb = vec![0.0f64; co];
    let mut gy = vec![0.0f32; taps * plane];
    for b in 0..n {
        let gob = &grad_out[b * co * ho * wo..(b + 1) * co * ho * wo];
        for oc in 0..co {
            let src = &gob[oc * ho * wo..(oc + 1) * ho * wo];
            gb[oc] += src.iter().map(|&v| v as f64).sum::<f64>();
            for tap in 0..4 {
                let (a, bb) = (tap / 2, tap % 2);
                let dst = &mut gy[(oc * 4 + tap) * plane..(oc * 4 + tap + 1) * plane];
                for i in 0..h {
                    let row = &src[(2 * i + a) * wo..(2 * i + a + 1) * wo];
                    for j in 0..w {
                        dst[i * w + j] = row[2 * j + bb];
                    }
                }
            }
        }
        let xb = &x[b * c * plane..(b + 1) * c * plane];
        gemm(c, taps, plane, weight, false, &gy, false, 0.0, &mut gx[b * c * plane..(b + 1) * c * plane]);
        gemm(c, plane, taps, xb, false, &gy, true, 1.0, &mut gw);
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb.into_iter().map(|v| v as f32).collect(),
    }
}

/// 2x2 max pooling. Returns the pooled values and, per output, the flat input
/// index that won (first in row-major window order on ties).
pub(crate) fn max_pool2_forward(x: &[f32], [n, c, h, w]: [usize; 4]) -> (Vec<f32>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Per-channel statistics over the `(N, H, W)` axes, accumulated in `f64`.
pub(crate) fn channel_moments(x: &[f32], [n, c, h, w]: [usize; 4]) -> (Vec<f32>, Vec<f32>) {
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for ch in 0..c {
        let samples = (0..n).flat_map(|b| x[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter());
        let mean = samples.clone().map(|&v| v as f64).sum::<f64>() / count;
        let var = samples.map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / count;
        means.push(mean as f32);
        vars.push(var as f32);
    }
    (means, vars)
}

/// Normalizes with the given per-channel mean/variance, then applies the
/// affine transform. Returns `(output, normalized)`.
pub(crate) fn batch_norm_apply(
    x: &[f32],
    [n, c, h, w]: [usize; 4],
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    beta: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let plane = h * w;
    let mut out = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let inv_std = 1.0 / (var[ch] + BN_EPSILON).sqrt();
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let z = (x[i] - mean[ch]) * inv_std;
                xhat[i] = z;
                out[i] = gamma[ch] * z + beta[ch];
            }
        }
    }
    (out, xhat)
}

pub(crate) struct BnGrads {
    pub input: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// Backward of batch norm. `batch_stats` selects the train-mode formula, where
/// the mean and variance themselves depend on the input.
pub(crate) fn batch_norm_backward(
    grad_out: &[f32],
    xhat: &[f32],
    [n, c, h, w]: [usize; 4],
    var: &[f32],
    gamma: &[f32],
    batch_stats: bool,
) -> BnGrads {
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut gx = vec![0.0f32; grad_out.len()];
    let mut g_gamma = vec![0.0f32; c];
    let mut g_beta = vec![0.0f32; c];
    for ch in 0..c {
        let offsets = || (0..n).map(move |b| (b * c + ch) * plane);
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for off in offsets() {
            for i in off..off + plane {
                sum_g += grad_out[i] as f64;
                sum_gx += grad_out[i] as f64 * xhat[i] as f64;
            }
        }
        g_gamma[ch] = sum_gx as f32;
        g_beta[ch] = sum_g as f32;
        let inv_std = 1.0 / ((var[ch] + BN_EPSILON) as f64).sqrt();
        let scale = gamma[ch] as f64 * inv_std;
        for off in offsets() {
            for i in off..off + plane {
                let g = grad_out[i] as f64;
                gx[i] = if batch_stats {
                    (scale * (g - sum_g / m - xhat[i] as f64 * sum_gx / m)) as f32
                } else {
                    (scale * g) as f32
                };
            }
        }
    }
    BnGrads {
        input: gx,
        gamma: g_gamma,
        beta: g_beta,
    }
}

pub(crate) fn prelu_forward(x: &[f32], [_, c, h, w]: [usize; 4], alpha: &[f32]) -> Vec<f32> {
    let plane = h * w;
    x.iter()
        .enumerate()
        .map(|(i, &v)| if v > 0.0 { v } else { alpha[(i / plane) % c] * v })
        .collect()
}

pub(crate) fn prelu_backward(
    x: &[f32],
    [_, c, h, w]: [usize; 4],
    alpha: &[f32],
    grad_out: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let plane = h * w;
    let mut gx = vec![0.0f32; x.len()];
    let mut ga = vec![0.0f64; c];
    for (i, (&v, &g)) in x.iter().zip(grad_out).enumerate() {
        let ch = (i / plane) % c;
        if v > 0.0 {
            gx[i] = g;
        } else {
            gx[i] = alpha[ch] * g;
            ga[ch] += g as f64 * v as f64;
        }
    }
    (gx, ga.into_iter().map(|v| v as f32).collect())
}

/// Inverted-dropout multipliers: 0 for dropped elements, `1/(1-rate)` for kept ones.
pub(crate) fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f32, rng: &mut R) -> Vec<f32> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
        .collect()
}

/// Logistic function, kept strictly inside (0, 1) in `f32`.
pub(crate) fn sigmoid(v: f32) -> f32 {
    const LO: f32 = f32::MIN_POSITIVE;
    const HI: f32 = 1.0 - f32::EPSILON / 2.0;
    (1.0 / (1.0 + (-v).exp())).clamp(LO, HI)
}
