use fpdenoise::data::synth::{generate_pair, GenConfig};
use fpdenoise::data::SamplePair;
use fpdenoise::metrics::{evaluate_dataset, mse, psnr, ssim, MetricError, SsimConfig};
use fpdenoise::tensor::Tensor;
use fpdenoise::Rng;
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;

fn print_image(index: usize) -> Tensor {
    generate_pair(&GenConfig::default(), index).clean
}

/// Textbook MS-SSIM: moments from separable Gaussian filtering of x, y, x^2,
/// y^2 and xy, standard weights renormalized to the usable scales.
fn oracle_ms_ssim(x: &Tensor, y: &Tensor) -> f64 {
    let weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let (mut h, mut w) = (x.shape()[1], x.shape()[2]);
    let mut scales = 5;
    while h.min(w) < 11 << (scales - 1) {
        scales -= 1;
    }
    let total: f64 = weights[..scales].iter().sum();
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let gs: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / gs).collect();
    let filter = |img: &[f64], h: usize, w: usize| {
        let (oh, ow) = (h - 10, w - 10);
        let mut rows = vec![0.0; h * ow];
        for r in 0..h {
            for c in 0..ow {
                rows[r * ow + c] = (0..11).map(|k| g[k] * img[r * w + c + k]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                out[r * ow + c] = (0..11).map(|k| g[k] * rows[(r + k) * ow + c]).sum();
            }
        }
        out
    };
    let mut a: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut b: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
    let (c1, c2) = (1e-4, 9e-4);
    let c3 = c2 / 2.0;
    let mut score = 1.0;
    for (j, weight) in weights.iter().enumerate().take(scales) {
        let sq = |v: &[f64]| v.iter().map(|t| t * t).collect::<Vec<_>>();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p * q).collect();
        let (ma, mb) = (filter(&a, h, w), filter(&b, h, w));
        let (ea, eb, eab) = (filter(&sq(&a), h, w), filter(&sq(&b), h, w), filter(&ab, h, w));
        let n = ma.len() as f64;
        let (mut l, mut c, mut s) = (0.0, 0.0, 0.0);
        for i in 0..ma.len() {
            let va = (ea[i] - ma[i] * ma[i]).max(0.0);
            let vb = (eb[i] - mb[i] * mb[i]).max(0.0);
            let cov = eab[i] - ma[i] * mb[i];
            l += (2.0 * ma[i] * mb[i] + c1) / (ma[i].powi(2) + mb[i].powi(2) + c1) / n;
            c += (2.0 * va.sqrt() * vb.sqrt() + c2) / (va + vb + c2) / n;
            s += (cov + c3) / (va.sqrt() * vb.sqrt() + c3) / n;
        }
        let e = weight / total;
        score *= c.max(0.0).powf(e) * s.max(0.0).powf(e);
        if j + 1 == scales {
            score *= l.powf(e);
        } else {
            let down = |v: &[f64]| {
                let mut o = Vec::new();
                for r in 0..h / 2 {
                    for q in 0..w / 2 {
                        let i = 2 * r * w + 2 * q;
                        o.push((v[i] + v[i + 1] + v[i + w] + v[i + w + 1]) / 4.0);
                    }
                }
                o
            };
            a = down(&a);
            b = down(&b);
            h /= 2;
            w /= 2;
        }
    }
    score
}

#[test]
fn psnr_examples() {
    let r = Tensor::full(vec![1, 8, 8], 1.0);
    let t = Tensor::full(vec![1, 8, 8], 0.5);
    let p = psnr(&r, &t, 1.0).unwrap();
    assert!((p - 6.0206).abs() < 1e-4, "{p}");
    assert_eq!(psnr(&r, &r, 1.0).unwrap(), f64::INFINITY);
    assert_eq!(psnr(&r, &t, -1.0).unwrap_err(), MetricError::DynamicRange(-1.0));
    assert!(matches!(psnr(&r, &Tensor::full(vec![1, 8, 4], 0.0), 1.0), Err(MetricError::ShapeMismatch(..))));
}

#[test]
fn psnr_sums_channels() {
    let r = Tensor::full(vec![3, 4, 4], 1.0);
    let t = Tensor::full(vec![3, 4, 4], 0.5);
    assert!((psnr(&r, &t, 1.0).unwrap() - 3.0 * 10.0 * 4f64.log10()).abs() < 1e-12);
}

#[test]
fn constant_shift_adds_its_square() {
    let mut rng = Rng::seed_from_u64(2);
    let x = Tensor::from_fn(vec![1, 16, 16], |_| rng.random_range(0..128) as f32 / 256.0);
    assert_eq!(mse(&x, &x).unwrap(), 0.0);
    for c in [0.25f32, 0.125, 0.5] {
        let y = Tensor::from_fn(vec![1, 16, 16], |i| x.data()[i] + c);
        assert_eq!(mse(&x, &y).unwrap(), (c as f64).powi(2));
    }
}

#[test]
fn identical_images_score_exactly_one() {
    for i in 0..3 {
        let x = print_image(i);
        assert_eq!(ssim(&x, &x, &SsimConfig::default()).unwrap(), 1.0);
        assert_eq!(ssim(&x, &x, &SsimConfig::single_scale()).unwrap(), 1.0);
    }
    let flat = Tensor::full(vec![1, 32, 32], 0.3);
    assert_eq!(ssim(&flat, &flat, &SsimConfig::default()).unwrap(), 1.0);
}

#[test]
fn matches_textbook_oracle() {
    let x = print_image(0);
    let noisy = generate_pair(&GenConfig::default(), 0).noisy;
    let inverted = Tensor::from_fn(x.shape().to_vec(), |i| 1.0 - x.data()[i]);
    for y in [&noisy, &inverted, &print_image(1)] {
        let ours = ssim(&x, y, &SsimConfig::default()).unwrap();
        let oracle = oracle_ms_ssim(&x, y);
        assert!((ours - oracle).abs() < 1e-6, "{ours} vs {oracle}");
    }
    let inv = ssim(&x, &inverted, &SsimConfig::default()).unwrap();
    assert!(inv < 0.5, "{inv}");
}

#[test]
fn ssim_is_symmetric() {
    let x = print_image(4);
    let y = generate_pair(&GenConfig::default(), 4).noisy;
    let a = ssim(&x, &y, &SsimConfig::default()).unwrap();
    let b = ssim(&y, &x, &SsimConfig::default()).unwrap();
    assert!((a - b).abs() < 1e-9);
}

#[test]
fn identical_crops_of_translated_images_agree() {
    let pair = generate_pair(&GenConfig::default(), 9);
    let crop = |t: &Tensor, oy: usize, ox: usize| {
        Tensor::from_fn(vec![1, 44, 44], |i| t.data()[(oy + i / 44) * 64 + ox + i % 44])
    };
    // Translate both images by (dy, dx) inside a larger canvas, then take the
    // correspondingly shifted crop.
    let (dy, dx) = (5, 3);
    let shift = |t: &Tensor| {
        Tensor::from_fn(vec![1, 64, 64], |i| {
            let (y, x) = (i / 64, i % 64);
            if y >= dy && x >= dx {
                t.data()[(y - dy) * 64 + x - dx]
            } else {
                1.0
            }
        })
    };
    let cfg = SsimConfig::default();
    let base = ssim(&crop(&pair.clean, 8, 8), &crop(&pair.noisy, 8, 8), &cfg).unwrap();
    let (sc, sn) = (shift(&pair.clean), shift(&pair.noisy));
    let moved = ssim(&crop(&sc, 8 + dy, 8 + dx), &crop(&sn, 8 + dy, 8 + dx), &cfg).unwrap();
    assert!((base - moved).abs() < 1e-9);
}

#[test]
fn noise_ladder_is_strictly_monotone() {
    for i in 0..3 {
        let x = print_image(i);
        let mut rng = Rng::seed_from_u64(100 + i as u64);
        let noise: Vec<f32> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
        let rungs: Vec<(f64, f64)> = [0.01f32, 0.05, 0.1, 0.2]
            .iter()
            .map(|&eps| {
                let y = Tensor::from_fn(x.shape().to_vec(), |k| x.data()[k] + eps * noise[k]);
                (psnr(&x, &y, 1.0).unwrap(), ssim(&x, &y, &SsimConfig::default()).unwrap())
            })
            .collect();
        for w in rungs.windows(2) {
            assert!(w[1].0 < w[0].0 && w[1].1 < w[0].1, "{rungs:?}");
        }
    }
}

fn pairs() -> Vec<SamplePair> {
    (0..4).map(|i| generate_pair(&GenConfig::default(), i)).collect()
}

#[test]
fn identity_model_reproduces_baseline() {
    let report = evaluate_dataset(|x: &Tensor| Ok::<_, MetricError>(x.clone()), &pairs(), &SsimConfig::default()).unwrap();
    for m in &report.images {
        assert_eq!(m.psnr, m.baseline_psnr);
        assert_eq!(m.ssim, m.baseline_ssim);
        assert_eq!(m.mse, m.baseline_mse);
    }
    let s = report.summary().unwrap();
    assert_eq!(s.psnr, s.baseline_psnr);
    assert!(report.table().contains("delta"));
    assert_eq!(report.to_csv().lines().count(), 6);
}

#[test]
fn oracle_model_is_perfect_and_mismatches_are_skipped() {
    let mut p = pairs();
    let clean: Vec<Tensor> = p.iter().map(|q| q.clean.clone()).collect();
    p.push(SamplePair {
        id: "odd".into(),
        clean: Tensor::zeros(vec![1, 64, 64]),
        noisy: Tensor::zeros(vec![1, 32, 64]),
    });
    let mut k = 0;
    let report = evaluate_dataset(
        |_: &Tensor| {
            k += 1;
            Ok::<_, MetricError>(clean[k - 1].clone())
        },
        &p,
        &SsimConfig::default(),
    )
    .unwrap();
    assert_eq!(report.images.len(), 4);
    assert_eq!(report.skipped, vec!["odd".to_string()]);
    for m in &report.images {
        assert_eq!(m.psnr, f64::INFINITY);
        assert_eq!(m.ssim, 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn ssim_bounded_by_one(seed in any::<u64>(), amp in 0.001f32..0.5) {
        let mut rng = Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(vec![1, 24, 24], |_| rng.random_range(0.0f32..1.0));
        let y = Tensor::from_fn(vec![1, 24, 24], |i| x.data()[i] + amp * rng.random_range(-1.0f32..1.0));
        let s = ssim(&x, &y, &SsimConfig::default()).unwrap();
        prop_assert!((0.0..1.0).contains(&s));
    }

    #[test]
    fn psnr_agrees_with_mse(seed in any::<u64>()) {
        let mut rng = Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(vec![1, 12, 12], |_| rng.random_range(0.0f32..1.0));
        let y = Tensor::from_fn(vec![1, 12, 12], |_| rng.random_range(0.0f32..1.0));
        let e = mse(&x, &y).unwrap();
        let p = psnr(&x, &y, 1.0).unwrap();
        prop_assert!((p - 10.0 * (1.0 / e).log10()).abs() <= 1e-9 * p.abs());
    }
}
