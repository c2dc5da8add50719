//! Image quality metrics: MSE, PSNR and multi-scale SSIM.
//!
//! All arithmetic is `f64`. Images are `[C, H, W]` tensors (SSIM needs
//! `C = 1`).

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::data::SamplePair;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("expected a [C, H, W] image, got shape {0:?}")]
    Rank(Vec<usize>),
    #[error("dynamic range must be positive, got {0}")]
    DynamicRange(f64),
    #[error("image {h}x{w} is smaller than the {window}x{window} window")]
    TooSmall { h: usize, w: usize, window: usize },
    #[error("invalid SSIM config: {0}")]
    Config(String),
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize), MetricError> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        [h, w] => Ok((1, *h, *w)),
        s => Err(MetricError::Rank(s.to_vec())),
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    dims3(a)
}

fn mse_slice(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.len() as f64
}

/// Mean squared error over every element.
pub fn mse(reference: &Tensor, test: &Tensor) -> Result<f64, MetricError> {
    if reference.shape() != test.shape() {
        return Err(MetricError::ShapeMismatch(reference.shape().to_vec(), test.shape().to_vec()));
    }
    Ok(mse_slice(reference.data(), test.data()))
}

/// Sum over channels of `10 log10(dr^2 / mse_c)`; a single channel gives the
/// usual PSNR. Returns `f64::INFINITY` when any channel matches exactly.
pub fn psnr(reference: &Tensor, test: &Tensor, dynamic_range: f64) -> Result<f64, MetricError> {
    if !(dynamic_range > 0.0) {
        return Err(MetricError::DynamicRange(dynamic_range));
    }
    let (c, h, w) = same_shape(reference, test)?;
    let plane = h * w;
    let mut total = 0.0;
    for k in 0..c {
        let range = k * plane..(k + 1) * plane;
        let e = mse_slice(&reference.data()[range.clone()], &test.data()[range]);
        if e == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += 10.0 * (dynamic_range * dynamic_range / e).log10();
    }
    Ok(total)
}

/// Published multi-scale weights, finest scale first. They sum to 1.0001;
/// [`SsimConfig::default`] divides them by that sum.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn default_weights() -> Vec<f64> {
    let total: f64 = MS_SSIM_WEIGHTS.iter().sum();
    MS_SSIM_WEIGHTS.iter().map(|w| w / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsimConfig {
    /// Contrast exponents per scale, finest first. Their count is the number
    /// of scales.
    pub beta: Vec<f64>,
    /// Structure exponents per scale.
    pub gamma: Vec<f64>,
    /// Luminance exponent at the coarsest scale.
    pub alpha: f64,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        let weights = default_weights();
        Self {
            alpha: weights[4],
            beta: weights.clone(),
            gamma: weights,
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

static SCALE_WARNING: AtomicBool = AtomicBool::new(false);

impl SsimConfig {
    /// Plain single-scale SSIM.
    pub fn single_scale() -> Self {
        Self {
            beta: vec![1.0],
            gamma: vec![1.0],
            alpha: 1.0,
            ..Self::default()
        }
    }

    pub fn scales(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        let bad = |m: &str| Err(MetricError::Config(m.into()));
        if self.beta.is_empty() || self.beta.len() != self.gamma.len() {
            return bad("beta and gamma need one entry per scale");
        }
        if self.beta.iter().chain(&self.gamma).chain([&self.alpha]).any(|e| !(*e > 0.0)) {
            return bad("exponents must be positive");
        }
        if self.window == 0 || self.window.is_multiple_of(2) || !(self.sigma > 0.0) {
            return bad("window must be odd and sigma positive");
        }
        if !(self.dynamic_range > 0.0) || self.k1 < 0.0 || self.k2 < 0.0 {
            return bad("dynamic range must be positive and stabilizers non-negative");
        }
        Ok(())
    }

    /// Number of scales usable on an `h`x`w` image: the largest `m` not above
    /// the configured count with `min(h, w) >= window * 2^(m-1)`.
    pub fn usable_scales(&self, h: usize, w: usize) -> usize {
        let side = h.min(w);
        let mut m = self.scales();
        while m > 1 && side < self.window << (m - 1) {
            m -= 1;
        }
        m
    }

    /// Truncates to `m` scales, renormalizing beta and gamma to their original
    /// sums and keeping `alpha` in proportion to the top-scale gamma.
    fn reduced(&self, m: usize) -> SsimConfig {
        if m == self.scales() {
            return self.clone();
        }
        let renorm = |v: &[f64]| {
            let full: f64 = v.iter().sum();
            let kept: f64 = v[..m].iter().sum();
            v[..m].iter().map(|x| x * full / kept).collect::<Vec<_>>()
        };
        let gamma = renorm(&self.gamma);
        let alpha = self.alpha / self.gamma[self.scales() - 1] * gamma[m - 1];
        SsimConfig {
            beta: renorm(&self.beta),
            gamma,
            alpha,
            ..self.clone()
        }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Spatial means of the luminance, contrast and structure maps over all
/// valid window positions.
fn components(x: &[f64], y: &[f64], h: usize, w: usize, win: &[f64], size: usize, c: [f64; 3]) -> [f64; 3] {
    let [c1, c2, c3] = c;
    let (oh, ow) = (h - size + 1, w - size + 1);
    let mut acc = [0.0; 3];
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my) = (0.0, 0.0);
            for ky in 0..size {
                let row = (oy + ky) * w + ox;
                for kx in 0..size {
                    let k = win[ky * size + kx];
                    mx += k * x[row + kx];
                    my += k * y[row + kx];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for ky in 0..size {
                let row = (oy + ky) * w + ox;
                for kx in 0..size {
                    let k = win[ky * size + kx];
                    let (dx, dy) = (x[row + kx] - mx, y[row + kx] - my);
                    vx += k * dx * dx;
                    vy += k * dy * dy;
                    cov += k * dx * dy;
                }
            }
            let sxy = (vx * vy).sqrt();
            acc[0] += (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            acc[1] += (2.0 * sxy + c2) / (vx + vy + c2);
            acc[2] += (cov + c3) / (sxy + c3);
        }
    }
    let n = (oh * ow) as f64;
    acc.map(|a| a / n)
}

fn downsample(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (nh, nw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        for xx in 0..nw {
            let i = 2 * y * w + 2 * xx;
            out.push((x[i] + x[i + 1] + x[i + w] + x[i + w + 1]) / 4.0);
        }
    }
    (out, nh, nw)
}

/// Multi-scale SSIM of a single-channel image pair.
///
/// Scales are reduced (with a one-time warning) when the image is too small for
/// the configured count. Negative mean contrast or structure terms are clamped
/// to zero before exponentiation.
pub fn ssim(reference: &Tensor, test: &Tensor, cfg: &SsimConfig) -> Result<f64, MetricError> {
    cfg.validate()?;
    let (c, h, w) = same_shape(reference, test)?;
    if c != 1 {
        return Err(MetricError::Rank(reference.shape().to_vec()));
    }
    if h.min(w) < cfg.window {
        return Err(MetricError::TooSmall { h, w, window: cfg.window });
    }
    let m = cfg.usable_scales(h, w);
    if m < cfg.scales() && !SCALE_WARNING.swap(true, Ordering::Relaxed) {
        log::warn!("ssim: {h}x{w} image supports {m} of {} scales; exponents renormalized", cfg.scales());
    }
    let cfg = cfg.reduced(m);
    let win = gaussian_window(cfg.window, cfg.sigma);
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let stab = [c1, c2, c2 / 2.0];

    let mut x: Vec<f64> = reference.data().iter().map(|&v| v as f64).collect();
    let mut y: Vec<f64> = test.data().iter().map(|&v| v as f64).collect();
    let (mut sh, mut sw) = (h, w);
    let mut score = 1.0;
    for j in 0..m {
        let [l, cj, sj] = components(&x, &y, sh, sw, &win, cfg.window, stab);
        score *= cj.max(0.0).powf(cfg.beta[j]) * sj.max(0.0).powf(cfg.gamma[j]);
        if j + 1 == m {
            score *= l.max(0.0).powf(cfg.alpha);
        } else {
            (x, _, _) = downsample(&x, sh, sw);
            (y, sh, sw) = downsample(&y, sh, sw);
        }
    }
    Ok(score)
}

/// Scores of one evaluated pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    /// The same metrics for the undenoised input.
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    pub baseline_mse: f64,
}

/// Dataset means of [`ImageMetrics`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    pub baseline_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    /// Ids skipped because the clean and noisy images differ in size.
    pub skipped: Vec<String>,
}

impl MetricReport {
    /// Means over all images; `None` when no image was evaluated. A mean over
    /// values including `+inf` is `+inf`.
    pub fn summary(&self) -> Option<Summary> {
        if self.images.is_empty() {
            return None;
        }
        let n = self.images.len() as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| self.images.iter().map(f).sum::<f64>() / n;
        Some(Summary {
            psnr: mean(|m| m.psnr),
            ssim: mean(|m| m.ssim),
            mse: mean(|m| m.mse),
            baseline_psnr: mean(|m| m.baseline_psnr),
            baseline_ssim: mean(|m| m.baseline_ssim),
            baseline_mse: mean(|m| m.baseline_mse),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr,ssim,mse,baseline_psnr,baseline_ssim,baseline_mse\n");
        for m in &self.images {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                m.id, m.psnr, m.ssim, m.mse, m.baseline_psnr, m.baseline_ssim, m.baseline_mse
            );
        }
        if let Some(s) = self.summary() {
            let _ = writeln!(
                out,
                "mean,{},{},{},{},{},{}",
                s.psnr, s.ssim, s.mse, s.baseline_psnr, s.baseline_ssim, s.baseline_mse
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }

    /// Console table: denoised, noisy baseline and their difference.
    pub fn table(&self) -> String {
        let Some(s) = self.summary() else {
            return "no images evaluated\n".into();
        };
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>10} {:>10} {:>10}", "", "PSNR (dB)", "SSIM", "MSE");
        let _ = writeln!(out, "{:<10} {:>10.4} {:>10.4} {:>10.6}", "denoised", s.psnr, s.ssim, s.mse);
        let _ = writeln!(out, "{:<10} {:>10.4} {:>10.4} {:>10.6}", "noisy", s.baseline_psnr, s.baseline_ssim, s.baseline_mse);
        let _ = writeln!(
            out,
            "{:<10} {:>+10.4} {:>+10.4} {:>+10.6}",
            "delta",
            s.psnr - s.baseline_psnr,
            s.ssim - s.baseline_ssim,
            s.mse - s.baseline_mse
        );
        let _ = writeln!(out, "{} images, {} skipped", self.images.len(), self.skipped.len());
        out
    }
}

/// Scores `denoise(noisy)` and the untouched `noisy` against `clean` for every
/// pair. Pairs whose images differ in size are skipped with a warning.
pub fn evaluate_dataset<E, F>(mut denoise: F, pairs: &[SamplePair], cfg: &SsimConfig) -> Result<MetricReport, E>
where
    F: FnMut(&Tensor) -> Result<Tensor, E>,
    E: From<MetricError>,
{
    let mut report = MetricReport::default();
    for pair in pairs {
        if pair.dims().is_err() {
            log::warn!("skipping {}: clean {:?} vs noisy {:?}", pair.id, pair.clean.shape(), pair.noisy.shape());
            report.skipped.push(pair.id.clone());
            continue;
        }
        let out = denoise(&pair.noisy)?;
        let dr = cfg.dynamic_range;
        report.images.push(ImageMetrics {
            id: pair.id.clone(),
            psnr: psnr(&pair.clean, &out, dr)?,
            ssim: ssim(&pair.clean, &out, cfg)?,
            mse: mse(&pair.clean, &out)?,
            baseline_psnr: psnr(&pair.clean, &pair.noisy, dr)?,
            baseline_ssim: ssim(&pair.clean, &pair.noisy, cfg)?,
            baseline_mse: mse(&pair.clean, &pair.noisy)?,
        });
    }
    Ok(report)
}
