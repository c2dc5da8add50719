//! Naive `f64` forward implementations used as the finite-difference oracle.
//!
//! These share no code with the tape kernels: plain index loops, no im2col,
//! no GEMM.

use crate::tensor::{ConvSpec, BN_EPSILON};

fn at(dims: [usize; 4], n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * dims[1] + c) * dims[2] + y) * dims[3] + x
}

/// Direct dilated cross-correlation with zero padding.
pub fn conv2d(x: &[f64], dims: [usize; 4], w: &[f64], b: &[f64], spec: &ConvSpec) -> (Vec<f64>, [usize; 4]) {
    let [n, ci, h, wd] = dims;
    let k = spec.kernel;
    let field = spec.dilated_kernel();
    let ho = (h + 2 * spec.padding - field) / spec.stride + 1;
    let wo = (wd + 2 * spec.padding - field) / spec.stride + 1;
    let co = spec.out_channels;
    let od = [n, co, ho, wo];
    let mut out = vec![0.0; n * co * ho * wo];
    for s in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[at(dims, s, c, iy as usize, ix as usize)] * w[((o * ci + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[at(od, s, o, oy, ox)] = acc;
                }
            }
        }
    }
    (out, od)
}

/// Scatter form of the kernel-2 stride-2 transposed convolution.
pub fn conv_transpose(x: &[f64], dims: [usize; 4], w: &[f64], b: &[f64], co: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, ci, h, wd] = dims;
    let od = [n, co, 2 * h, 2 * wd];
    let mut out = vec![0.0; n * co * 4 * h * wd];
    for s in 0..n {
        for o in 0..co {
            for y in 0..2 * h {
                for xx in 0..2 * wd {
                    out[at(od, s, o, y, xx)] = b[o];
                }
            }
        }
        for c in 0..ci {
            for i in 0..h {
                for j in 0..wd {
                    let v = x[at(dims, s, c, i, j)];
                    for o in 0..co {
                        for a in 0..2 {
                            for bb in 0..2 {
                                out[at(od, s, o, 2 * i + a, 2 * j + bb)] += v * w[((c * co + o) * 2 + a) * 2 + bb];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, od)
}

pub fn max_pool2(x: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let mut out = Vec::new();
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x[at(dims, s, ch, 2 * oy + dy, 2 * ox + dx)]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

/// Batch norm; `stats = None` computes biased batch statistics.
pub fn batch_norm(
    x: &[f64],
    dims: [usize; 4],
    gamma: &[f64],
    beta: &[f64],
    stats: Option<(&[f64], &[f64])>,
) -> Vec<f64> {
    let [n, c, h, w] = dims;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let idx: Vec<usize> = (0..n)
            .flat_map(|s| (0..h).flat_map(move |y| (0..w).map(move |xx| at(dims, s, ch, y, xx))))
            .collect();
        let (mean, var) = match stats {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let mean = idx.iter().map(|&i| x[i]).sum::<f64>() / idx.len() as f64;
                let var = idx.iter().map(|&i| (x[i] - mean).powi(2)).sum::<f64>() / idx.len() as f64;
                (mean, var)
            }
        };
        let denom = (var + BN_EPSILON as f64).sqrt();
        for &i in &idx {
            out[i] = gamma[ch] * (x[i] - mean) / denom + beta[ch];
        }
    }
    out
}

pub fn prelu(x: &[f64], dims: [usize; 4], alpha: &[f64]) -> Vec<f64> {
    let plane = dims[2] * dims[3];
    x.iter()
        .enumerate()
        .map(|(i, &v)| if v > 0.0 { v } else { alpha[(i / plane) % dims[1]] * v })
        .collect()
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
}

pub fn concat_channels(a: &[f64], da: [usize; 4], b: &[f64], db: [usize; 4]) -> Vec<f64> {
    let plane = da[2] * da[3];
    let mut out = Vec::new();
    for s in 0..da[0] {
        out.extend_from_slice(&a[s * da[1] * plane..(s + 1) * da[1] * plane]);
        out.extend_from_slice(&b[s * db[1] * plane..(s + 1) * db[1] * plane]);
    }
    out
}

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64
}

/// Train-mode forward pass of the whole network, mirroring the layer wiring
/// of [`crate::network::Model`], with dropout masks drawn from `rng` in the
/// same order as the tape forward.
pub fn model_forward(
    spec: &crate::network::ModelSpec,
    params: &std::collections::BTreeMap<String, Vec<f64>>,
    input: &[f64],
    dims: [usize; 4],
    rng: &mut crate::Rng,
) -> Vec<f64> {
    let p = |name: String| params.get(&name).unwrap_or_else(|| panic!("missing {name}")).as_slice();
    let mut drop = |x: Vec<f64>| -> Vec<f64> {
        if spec.dropout_rate == 0.0 {
            return x;
        }
        let mask = crate::tensor::kernels_dropout_mask(x.len(), spec.dropout_rate, rng);
        x.iter().zip(mask).map(|(v, m)| v * m as f64).collect()
    };
    let mut unit = |x: &[f64], d: [usize; 4], block: &str, j: usize, conv: ConvSpec| {
        let (y, yd) = conv2d(x, d, p(format!("{block}.conv{j}.weight")), p(format!("{block}.conv{j}.bias")), &conv);
        let y = batch_norm(&y, yd, p(format!("{block}.bn{j}.gamma")), p(format!("{block}.bn{j}.beta")), None);
        let y = prelu(&y, yd, p(format!("{block}.prelu{j}.alpha")));
        (drop(y), yd)
    };

    let ch = spec.channels();
    let mut x = input.to_vec();
    let mut xd = dims;
    let mut skips = Vec::new();
    for (b, &c) in ch.iter().enumerate() {
        if b > 0 {
            x = max_pool2(&x, xd);
            xd = [xd[0], xd[1], xd[2] / 2, xd[3] / 2];
        }
        let block = format!("enc{}", b + 1);
        for (j, &d) in spec.dilations.iter().enumerate() {
            let (y, yd) = unit(&x, xd, &block, j + 1, ConvSpec::same(xd[1], c, d));
            x = y;
            xd = yd;
        }
        skips.push((x.clone(), xd));
    }
    for d in 1..=spec.decoder_blocks {
        let level = spec.encoder_blocks - 1 - d;
        let c = ch[level];
        let block = format!("dec{d}");
        let (up, ud) = conv_transpose(&x, xd, p(format!("{block}.up.weight")), p(format!("{block}.up.bias")), c);
        let (skip, sd) = &skips[level];
        let fused = concat_channels(skip, *sd, &up, ud);
        let fd = [ud[0], sd[1] + ud[1], ud[2], ud[3]];
        let (proj, pd) = conv2d(&fused, fd, p(format!("{block}.proj.weight")), p(format!("{block}.proj.bias")), &ConvSpec::pointwise(2 * c, c));
        let mut y = proj.clone();
        for j in 1..=2 {
            y = unit(&y, pd, &block, j, ConvSpec::same(c, c, 1)).0;
        }
        x = y.iter().zip(&proj).map(|(a, b)| a + b).collect();
        xd = pd;
    }
    let (logits, _) = conv2d(&x, xd, p("head.weight".into()), p("head.bias".into()), &ConvSpec::pointwise(xd[1], spec.output_channels));
    sigmoid(&logits)
}
