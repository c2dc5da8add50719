//! Seedable synthetic fingerprint generator.
//!
//! A clean print is an oriented cosine ridge pattern driven by a smooth random
//! orientation field, soft-thresholded into dark ridges and light valleys and
//! vignetted by an elliptical mask on a white background. The noisy copy runs
//! the clean image through a configurable degradation recipe.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng as _, SeedableRng};

use super::{DataError, SamplePair};
use crate::tensor::Tensor;
use crate::Rng;

/// One degradation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DegradeOp {
    /// Multiplies the image by a textured surface; `strength` in `[0, 1]`.
    BackgroundBlend { strength: f64 },
    /// Gaussian blur with standard deviation `sigma` pixels, in `(0, 10]`.
    GaussianBlur { sigma: f64 },
    /// Salt-and-pepper noise hitting a fraction `rate` of pixels.
    Speckle { rate: f64 },
    /// `count` light line segments `width` pixels thick.
    ScratchOcclusion { count: usize, width: usize },
    /// Random gain in `1 ± range` and offset in `±range / 2`.
    ContrastJitter { range: f64 },
}

/// A degradation applied with probability `probability`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Degradation {
    pub op: DegradeOp,
    pub probability: f64,
}

impl Degradation {
    pub fn always(op: DegradeOp) -> Self {
        Self { op, probability: 1.0 }
    }

    fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(format!("probability {} outside [0, 1]", self.probability));
        }
        let ok = match self.op {
            DegradeOp::BackgroundBlend { strength } => (0.0..=1.0).contains(&strength),
            DegradeOp::GaussianBlur { sigma } => sigma > 0.0 && sigma <= 10.0,
            DegradeOp::Speckle { rate } => (0.0..=1.0).contains(&rate),
            DegradeOp::ScratchOcclusion { count, width } => count <= 64 && (1..=16).contains(&width),
            DegradeOp::ContrastJitter { range } => (0.0..1.0).contains(&range),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("{self} has a parameter outside its documented range"))
        }
    }
}

/// Text form `name:param@probability`, e.g. `speckle:0.05@0.7` or
/// `scratch_occlusion:3x2@0.5`. The probability defaults to 1.
impl FromStr for Degradation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (body, probability) = match s.split_once('@') {
            Some((b, p)) => (b, p.trim().parse::<f64>().map_err(|e| format!("{s}: probability: {e}"))?),
            None => (s, 1.0),
        };
        let (name, arg) = body
            .split_once(':')
            .ok_or_else(|| format!("{s}: expected name:parameter"))?;
        let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{s}: {e}"));
        let op = match name.trim() {
            "background_blend" => DegradeOp::BackgroundBlend { strength: num(arg)? },
            "gaussian_blur" => DegradeOp::GaussianBlur { sigma: num(arg)? },
            "speckle" => DegradeOp::Speckle { rate: num(arg)? },
            "contrast_jitter" => DegradeOp::ContrastJitter { range: num(arg)? },
            "scratch_occlusion" => {
                let (c, w) = arg.split_once('x').ok_or_else(|| format!("{s}: expected COUNTxWIDTH"))?;
                let int = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{s}: {e}"));
                DegradeOp::ScratchOcclusion {
                    count: int(c)?,
                    width: int(w)?,
                }
            }
            other => return Err(format!("unknown degradation {other:?}")),
        };
        let d = Degradation { op, probability };
        d.validate()?;
        Ok(d)
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.op {
            DegradeOp::BackgroundBlend { strength } => write!(f, "background_blend:{strength}")?,
            DegradeOp::GaussianBlur { sigma } => write!(f, "gaussian_blur:{sigma}")?,
            DegradeOp::Speckle { rate } => write!(f, "speckle:{rate}")?,
            DegradeOp::ScratchOcclusion { count, width } => write!(f, "scratch_occlusion:{count}x{width}")?,
            DegradeOp::ContrastJitter { range } => write!(f, "contrast_jitter:{range}")?,
        }
        write!(f, "@{}", self.probability)
    }
}

/// Parses a comma-separated recipe; `none` or an empty string is the empty
/// recipe.
pub fn parse_recipe(s: &str) -> Result<Vec<Degradation>, String> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',').map(str::parse).collect()
}

pub fn format_recipe(recipe: &[Degradation]) -> String {
    if recipe.is_empty() {
        return "none".into();
    }
    recipe.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Ridge frequency in cycles per pixel.
    pub ridge_frequency: f64,
    /// Standard deviation, in pixels, of the low-pass filter that smooths the
    /// random orientation field.
    pub orientation_smoothness: f64,
    pub recipe: Vec<Degradation>,
}

impl GenConfig {
    pub fn default_recipe() -> Vec<Degradation> {
        vec![
            Degradation {
                op: DegradeOp::BackgroundBlend { strength: 0.6 },
                probability: 0.8,
            },
            Degradation {
                op: DegradeOp::GaussianBlur { sigma: 1.0 },
                probability: 0.5,
            },
            Degradation {
                op: DegradeOp::Speckle { rate: 0.05 },
                probability: 0.7,
            },
            Degradation {
                op: DegradeOp::ScratchOcclusion { count: 3, width: 2 },
                probability: 0.5,
            },
            Degradation {
                op: DegradeOp::ContrastJitter { range: 0.3 },
                probability: 0.7,
            },
        ]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return bad(format!("size {}x{} must be positive multiples of 8", self.height, self.width));
        }
        if !(self.ridge_frequency > 0.0 && self.ridge_frequency < 0.5) {
            return bad(format!("ridge_frequency {} outside (0, 0.5)", self.ridge_frequency));
        }
        if !(self.orientation_smoothness > 0.0 && self.orientation_smoothness.is_finite()) {
            return bad(format!("orientation_smoothness {} must be positive", self.orientation_smoothness));
        }
        for d in &self.recipe {
            d.validate().map_err(DataError::InvalidConfig)?;
        }
        Ok(())
    }
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 100,
            height: 64,
            width: 64,
            seed: 0,
            ridge_frequency: 0.1,
            orientation_smoothness: 12.0,
            recipe: Self::default_recipe(),
        }
    }
}

/// Generator dedicated to sample `index`.
fn sample_rng(seed: u64, index: usize) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// In-place separable Gaussian blur with edge replication.
pub(crate) fn gaussian_blur(img: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, c)| c * img[y * w + (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            img[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, c)| c * tmp[(y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize * w + x])
                .sum();
        }
    }
}

fn smooth_noise(h: usize, w: usize, sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let mut n: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    gaussian_blur(&mut n, h, w, sigma);
    let mean = n.iter().sum::<f64>() / n.len() as f64;
    let std = (n.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.len() as f64).sqrt().max(1e-12);
    n.iter().map(|v| (v - mean) / std).collect()
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// The clean print, row-major in `[0, 1]`.
fn clean_image(cfg: &GenConfig, rng: &mut Rng) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    // Orientation field in doubled-angle form so that theta and theta + pi agree.
    let angles: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..PI)).collect();
    let mut c2: Vec<f64> = angles.iter().map(|a| (2.0 * a).cos()).collect();
    let mut s2: Vec<f64> = angles.iter().map(|a| (2.0 * a).sin()).collect();
    gaussian_blur(&mut c2, h, w, cfg.orientation_smoothness);
    gaussian_blur(&mut s2, h, w, cfg.orientation_smoothness);

    let (cy, cx) = (
        h as f64 / 2.0 + rng.random_range(-0.05..0.05) * h as f64,
        w as f64 / 2.0 + rng.random_range(-0.05..0.05) * w as f64,
    );
    let (ay, ax) = (h as f64 * rng.random_range(0.36..0.46), w as f64 * rng.random_range(0.30..0.40));
    let phase = rng.random_range(0.0..2.0 * PI);
    let depth = rng.random_range(0.75..0.9);
    let sharpness = 2.5f64;
    let mut out = vec![1.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let theta = 0.5 * s2[i].atan2(c2[i]);
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let u = dx * theta.cos() + dy * theta.sin();
            let ridge = (2.0 * PI * cfg.ridge_frequency * u + phase).cos();
            let ink = 0.5 * (1.0 + (sharpness * ridge).tanh() / sharpness.tanh());
            let rho = ((dy / ay).powi(2) + (dx / ax).powi(2)).sqrt();
            let mask = smoothstep((1.0 - rho) / 0.15);
            out[i] = 1.0 - mask * depth * ink;
        }
    }
    out
}

fn background(h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
    let level = rng.random_range(0.35..0.75);
    let grain = rng.random_range(1.5..5.0);
    let noise = smooth_noise(h, w, grain, rng);
    let freq = rng.random_range(0.02..0.08);
    let angle = rng.random_range(0.0..PI);
    let stripe_amp = rng.random_range(0.0..0.12);
    let phase = rng.random_range(0.0..2.0 * PI);
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let stripe = (2.0 * PI * freq * (x * angle.cos() + y * angle.sin()) + phase).sin();
            (level + 0.15 * noise[i] + stripe_amp * stripe).clamp(0.0, 1.0)
        })
        .collect()
}

fn scratch(img: &mut [f64], h: usize, w: usize, width: usize, rng: &mut Rng) {
    let p0 = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    let p1 = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    let value = rng.random_range(0.6..1.0);
    let (vy, vx) = (p1.0 - p0.0, p1.1 - p0.1);
    let len2 = (vy * vy + vx * vx).max(1e-12);
    let half = width as f64 / 2.0;
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5 - p0.0, x as f64 + 0.5 - p0.1);
            let t = ((py * vy + px * vx) / len2).clamp(0.0, 1.0);
            let d2 = (py - t * vy).powi(2) + (px - t * vx).powi(2);
            if d2 <= half * half {
                img[y * w + x] = value;
            }
        }
    }
}

fn degrade(img: &mut [f64], h: usize, w: usize, op: DegradeOp, rng: &mut Rng) {
    match op {
        DegradeOp::BackgroundBlend { strength } => {
            let bg = background(h, w, rng);
            for (v, b) in img.iter_mut().zip(bg) {
                *v *= 1.0 - strength * (1.0 - b);
            }
        }
        DegradeOp::GaussianBlur { sigma } => gaussian_blur(img, h, w, sigma),
        DegradeOp::Speckle { rate } => {
            for v in img.iter_mut() {
                if rng.random::<f64>() < rate {
                    *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                }
            }
        }
        DegradeOp::ScratchOcclusion { count, width } => {
            for _ in 0..count {
                scratch(img, h, w, width, rng);
            }
        }
        DegradeOp::ContrastJitter { range } => {
            let gain = 1.0 + rng.random_range(-range..=range);
            let offset = rng.random_range(-range..=range) / 2.0;
            for v in img.iter_mut() {
                *v = (*v - 0.5) * gain + 0.5 + offset;
            }
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn to_tensor(img: &[f64], h: usize, w: usize) -> Tensor {
    Tensor::new(vec![1, h, w], img.iter().map(|&v| v as f32).collect()).expect("image size")
}

/// Sample `index` of the dataset described by `cfg`. A pure function of
/// `(cfg, index)`.
pub fn generate_pair(cfg: &GenConfig, index: usize) -> SamplePair {
    let mut rng = sample_rng(cfg.seed, index);
    let (h, w) = (cfg.height, cfg.width);
    let clean = clean_image(cfg, &mut rng);
    let mut noisy = clean.clone();
    for d in &cfg.recipe {
        let coin: f64 = rng.random();
        if coin < d.probability {
            degrade(&mut noisy, h, w, d.op, &mut rng);
        }
    }
    SamplePair {
        id: format!("{index:05}"),
        clean: to_tensor(&clean, h, w),
        noisy: to_tensor(&noisy, h, w),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_text_round_trips() {
        let recipe = GenConfig::default_recipe();
        assert_eq!(parse_recipe(&format_recipe(&recipe)).unwrap(), recipe);
        assert!(parse_recipe("none").unwrap().is_empty());
        assert!(parse_recipe("speckle:1.5").is_err());
        assert!(parse_recipe("smudge:1").is_err());
        assert_eq!(
            parse_recipe("scratch_occlusion:2x3").unwrap()[0],
            Degradation::always(DegradeOp::ScratchOcclusion { count: 2, width: 3 })
        );
    }

    #[test]
    fn blur_preserves_constant() {
        let mut img = vec![0.3; 12];
        gaussian_blur(&mut img, 3, 4, 1.2);
        assert!(img.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = GenConfig {
            height: 60,
            ..GenConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = GenConfig {
            ridge_frequency: 0.5,
            ..GenConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(GenConfig::default().validate().is_ok());
    }
}
