use std::f64::consts::PI;

use fpdenoise::data::pgm::{self, GrayImage};
use fpdenoise::data::synth::{generate_pair, DegradeOp, Degradation, GenConfig};
use fpdenoise::data::{load_dataset, write_dataset, AugmentParams, DataError, SamplePair, Split};
use fpdenoise::metrics::psnr;
use fpdenoise::tensor::Tensor;
use fpdenoise::Rng;
use proptest::prelude::*;
use rand::SeedableRng;

/// Radial frequency (cycles/pixel) of the strongest component of the central
/// `crop`x`crop` window, by a direct Hann-windowed DFT on a polar grid.
fn dominant_frequency(img: &Tensor, crop: usize) -> f64 {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (oy, ox) = ((h - crop) / 2, (w - crop) / 2);
    let mut patch = Vec::with_capacity(crop * crop);
    for y in 0..crop {
        for x in 0..crop {
            patch.push(img.data()[(oy + y) * w + ox + x] as f64);
        }
    }
    let mean = patch.iter().sum::<f64>() / patch.len() as f64;
    let hann = |i: usize| 0.5 - 0.5 * (2.0 * PI * i as f64 / (crop - 1) as f64).cos();
    for y in 0..crop {
        for x in 0..crop {
            patch[y * crop + x] = (patch[y * crop + x] - mean) * hann(y) * hann(x);
        }
    }
    let mut best = (0.0, 0.0);
    let mut r = 0.03;
    while r <= 0.45 {
        let mut power = 0.0;
        for a in 0..48 {
            let t = PI * a as f64 / 48.0;
            let (fy, fx) = (r * t.sin(), r * t.cos());
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..crop {
                for x in 0..crop {
                    let ph = -2.0 * PI * (fy * y as f64 + fx * x as f64);
                    re += patch[y * crop + x] * ph.cos();
                    im += patch[y * crop + x] * ph.sin();
                }
            }
            power += re * re + im * im;
        }
        if power > best.1 {
            best = (r, power);
        }
        r += 0.005;
    }
    best.0
}

#[test]
fn ridge_frequency_shows_in_spectrum() {
    let cfg = GenConfig {
        height: 96,
        width: 96,
        ..GenConfig::default()
    };
    for index in 0..3 {
        let f = dominant_frequency(&generate_pair(&cfg, index).clean, 48);
        println!("sample {index}: dominant frequency {f:.3}");
        assert!((f - 0.1).abs() <= 0.02, "sample {index}: {f}");
    }
}

#[test]
fn generation_is_deterministic_and_bounded() {
    let cfg = GenConfig::default();
    let a = generate_pair(&cfg, 7);
    let b = generate_pair(&cfg, 7);
    assert_eq!(a, b);
    assert_ne!(a, generate_pair(&cfg, 8));
    for t in [&a.clean, &a.noisy] {
        assert_eq!(t.shape(), &[1, 64, 64]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_ne!(a.clean, a.noisy);
}

#[test]
fn empty_recipe_leaves_clean_image() {
    let cfg = GenConfig {
        recipe: Vec::new(),
        ..GenConfig::default()
    };
    let p = generate_pair(&cfg, 3);
    assert_eq!(p.clean, p.noisy);
    assert_eq!(psnr(&p.clean, &p.noisy, 1.0).unwrap(), f64::INFINITY);
}

fn mean_baseline_psnr(rate: f64) -> f64 {
    let cfg = GenConfig {
        recipe: vec![Degradation::always(DegradeOp::Speckle { rate })],
        ..GenConfig::default()
    };
    (0..20)
        .map(|i| {
            let p = generate_pair(&cfg, i);
            psnr(&p.clean, &p.noisy, 1.0).unwrap()
        })
        .sum::<f64>()
        / 20.0
}

#[test]
fn more_speckle_lowers_baseline_psnr() {
    let ladder: Vec<f64> = [0.05, 0.1, 0.2].iter().map(|&r| mean_baseline_psnr(r)).collect();
    println!("speckle ladder {ladder:?}");
    assert!(ladder.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn dataset_round_trip_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        count: 20,
        height: 32,
        width: 32,
        seed: 5,
        ..GenConfig::default()
    };
    let written = write_dataset(&cfg, dir.path(), [0.8, 0.1, 0.1]).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(written, loaded);
    assert_eq!([16, 2, 2], Split::ALL.map(|s| loaded.ids(s).len()));

    let pair = loaded.load_pair("00004").unwrap();
    let fresh = generate_pair(&cfg, 4);
    let quantize = |t: &Tensor| GrayImage::from_tensor(t).to_tensor();
    assert_eq!(pair.clean, quantize(&fresh.clean));
    assert_eq!(pair.noisy, quantize(&fresh.noisy));
    assert_eq!(quantize(&pair.clean), pair.clean);

    let again = tempfile::tempdir().unwrap();
    write_dataset(&cfg, again.path(), [0.8, 0.1, 0.1]).unwrap();
    for name in ["manifest.txt", "clean/00011.pgm", "noisy/00011.pgm"] {
        assert_eq!(
            std::fs::read(dir.path().join(name)).unwrap(),
            std::fs::read(again.path().join(name)).unwrap()
        );
    }
}

#[test]
fn five_samples_split_four_zero_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        count: 5,
        height: 16,
        width: 16,
        ..GenConfig::default()
    };
    let m = write_dataset(&cfg, dir.path(), [0.8, 0.1, 0.1]).unwrap();
    assert_eq!([4, 0, 1], Split::ALL.map(|s| m.ids(s).len()));
}

#[test]
fn loader_lists_missing_ids_and_bad_pgm_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        count: 4,
        height: 16,
        width: 16,
        ..GenConfig::default()
    };
    write_dataset(&cfg, dir.path(), [0.5, 0.25, 0.25]).unwrap();
    std::fs::remove_file(dir.path().join("noisy/00002.pgm")).unwrap();
    std::fs::remove_file(dir.path().join("clean/00003.pgm")).unwrap();
    match load_dataset(dir.path()) {
        Err(DataError::MissingFiles(ids)) => assert_eq!(ids, vec!["00002", "00003"]),
        other => panic!("unexpected {other:?}"),
    }

    let bad = dir.path().join("clean/00000.pgm");
    std::fs::write(&bad, b"P5\n16 16\n255\n\x00\x00").unwrap();
    match pgm::read(&bad) {
        Err(DataError::Pgm { source, .. }) => assert_eq!(source.offset, 15),
        other => panic!("unexpected {other:?}"),
    }
}

fn interior(t: &Tensor, border: usize) -> Tensor {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut out = Vec::new();
    for y in border..h - border {
        for x in border..w - border {
            out.push(t.data()[y * w + x]);
        }
    }
    Tensor::new(vec![1, h - 2 * border, w - 2 * border], out).unwrap()
}

#[test]
fn augmentation_keeps_pairs_aligned() {
    let cfg = GenConfig {
        recipe: vec![
            Degradation::always(DegradeOp::BackgroundBlend { strength: 0.6 }),
            Degradation::always(DegradeOp::ContrastJitter { range: 0.3 }),
        ],
        ..GenConfig::default()
    };
    let mut rng = Rng::seed_from_u64(12);
    for index in 0..6 {
        let pair = generate_pair(&cfg, index);
        let before = psnr(&interior(&pair.clean, 16), &interior(&pair.noisy, 16), 1.0).unwrap();
        let aug = fpdenoise::data::augment(&pair, &mut rng);
        let after = psnr(&interior(&aug.clean, 16), &interior(&aug.noisy, 16), 1.0).unwrap();
        println!("pair {index}: {before:.3} dB -> {after:.3} dB");
        assert!((after - before).abs() < 0.5, "pair {index}: {before} vs {after}");
    }
}

#[test]
fn both_images_get_the_same_draw() {
    let pair = generate_pair(&GenConfig::default(), 2);
    let aug = fpdenoise::data::augment(&pair, &mut Rng::seed_from_u64(4));
    let params = AugmentParams::draw(&mut Rng::seed_from_u64(4));
    assert_eq!(aug.clean, params.apply(&pair.clean));
    assert_eq!(aug.noisy, params.apply(&pair.noisy));
}

#[test]
fn identity_augmentation_is_exact() {
    let pair = generate_pair(&GenConfig::default(), 0);
    let out = SamplePair {
        id: pair.id.clone(),
        clean: AugmentParams::IDENTITY.apply(&pair.clean),
        noisy: AugmentParams::IDENTITY.apply(&pair.noisy),
    };
    assert_eq!(out, pair);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn splits_partition_ids(count in 1usize..300, seed in any::<u64>()) {
        let splits = fpdenoise::data::manifest::assign_splits(count, [0.8, 0.1, 0.1], seed);
        prop_assert_eq!(splits.len(), count);
        let sizes = fpdenoise::data::split_sizes(count, [0.8, 0.1, 0.1]);
        for (k, s) in Split::ALL.iter().enumerate() {
            prop_assert_eq!(splits.iter().filter(|x| *x == s).count(), sizes[k]);
        }
        prop_assert_eq!(sizes.iter().sum::<usize>(), count);
    }

    #[test]
    fn augmented_pairs_stay_in_range(index in 0usize..1000, seed in any::<u64>()) {
        let cfg = GenConfig { height: 32, width: 32, ..GenConfig::default() };
        let pair = generate_pair(&cfg, index);
        let aug = fpdenoise::data::augment(&pair, &mut Rng::seed_from_u64(seed));
        prop_assert_eq!(aug.clean.shape(), pair.clean.shape());
        for t in [&aug.clean, &aug.noisy] {
            prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
