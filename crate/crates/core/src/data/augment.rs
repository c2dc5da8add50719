//! Geometric augmentation applied identically to both images of a pair.

use rand::Rng as _;

use super::SamplePair;
use crate::tensor::Tensor;
use crate::Rng;

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const SCALE_RANGE: (f64, f64) = (0.9, 1.1);
/// Value given to pixels that map from outside the source image.
pub const FILL: f32 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rotation_deg: 0.0,
        scale: 1.0,
        flip_h: false,
        flip_v: false,
    };

    pub fn draw(rng: &mut Rng) -> Self {
        Self {
            rotation_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            flip_h: rng.random_bool(0.5),
            flip_v: rng.random_bool(0.5),
        }
    }

    /// Rotates and scales about the image center with bilinear sampling, then
    /// flips. Works on `[C, H, W]` tensors; output is clamped to `[0, 1]`.
    pub fn apply(&self, img: &Tensor) -> Tensor {
        let (h, w) = match img.shape() {
            [.., h, w] => (*h, *w),
            _ => return img.clone(),
        };
        let planes = img.len() / (h * w);
        let mut out = if self.rotation_deg == 0.0 && self.scale == 1.0 {
            img.data().to_vec()
        } else {
            let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let mut out = Vec::with_capacity(img.len());
            for p in 0..planes {
                let src = &img.data()[p * h * w..(p + 1) * h * w];
                let at = |y: isize, x: isize| -> f64 {
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        FILL as f64
                    } else {
                        src[y as usize * w + x as usize] as f64
                    }
                };
                for y in 0..h {
                    for x in 0..w {
                        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                        // inverse map: undo the rotation, then the scale
                        let sy = (cos * dy - sin * dx) / self.scale + cy;
                        let sx = (sin * dy + cos * dx) / self.scale + cx;
                        let (y0, x0) = (sy.floor(), sx.floor());
                        let (fy, fx) = (sy - y0, sx - x0);
                        let (y0, x0) = (y0 as isize, x0 as isize);
                        let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                            + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
                        out.push(v as f32);
                    }
                }
            }
            out
        };
        for plane in out.chunks_exact_mut(h * w) {
            if self.flip_h {
                for row in plane.chunks_exact_mut(w) {
                    row.reverse();
                }
            }
            if self.flip_v {
                for y in 0..h / 2 {
                    for x in 0..w {
                        plane.swap(y * w + x, (h - 1 - y) * w + x);
                    }
                }
            }
        }
        for v in &mut out {
            *v = v.clamp(0.0, 1.0);
        }
        Tensor::new(img.shape().to_vec(), out).expect("shape preserved")
    }
}

/// Draws one transform and applies it to both images.
pub fn augment(pair: &SamplePair, rng: &mut Rng) -> SamplePair {
    let params = AugmentParams::draw(rng);
    SamplePair {
        id: pair.id.clone(),
        clean: params.apply(&pair.clean),
        noisy: params.apply(&pair.noisy),
    }
}
