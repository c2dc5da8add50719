use fpdenoise::gradcheck;
use fpdenoise::network::{build_model, Hooks, Model, ModelSpec, NetworkError};
use fpdenoise::tensor::{GradTape, Phase, Tensor};
use fpdenoise::Rng;
use rand::{Rng as _, SeedableRng};

fn small(base: usize) -> ModelSpec {
    ModelSpec {
        base_channels: base,
        ..ModelSpec::default()
    }
}

fn image(n: usize, side: usize, seed: u64) -> Tensor {
    let mut rng = Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![n, 1, side, side], |_| rng.random_range(0.0f32..1.0))
}

#[test]
fn default_channel_sequence_and_layer_shapes() {
    let spec = ModelSpec::default();
    assert_eq!(spec.channels(), vec![32, 64, 128, 256]);
    assert_eq!((spec.encoder_blocks, spec.decoder_blocks), (4, 3));
    let params = build_model(&spec, &mut Rng::seed_from_u64(0)).unwrap();
    let w = params.get("enc2.conv1.weight").unwrap();
    assert_eq!(w.shape(), &[64, 32, 3, 3]);
    assert_eq!(w.len(), 18_432);
    assert_eq!(params.get("enc2.conv1.bias").unwrap().len(), 64);
    assert_eq!(params.trainable_names().next(), Some("dec1.bn1.beta"));
}

#[test]
fn capped_channels() {
    let spec = ModelSpec {
        base_channels: 100,
        ..ModelSpec::default()
    };
    assert_eq!(spec.channels(), vec![100, 200, 256, 256]);
}

#[test]
fn initialization_values() {
    let spec = small(8);
    let params = build_model(&spec, &mut Rng::seed_from_u64(3)).unwrap();
    for (name, t) in params.iter() {
        let d = t.data();
        if name.ends_with(".bias") || name.ends_with(".beta") {
            assert!(d.iter().all(|&v| v == 0.0), "{name}");
        } else if name.ends_with(".gamma") {
            assert!(d.iter().all(|&v| v == 1.0), "{name}");
        } else if name.ends_with(".alpha") {
            assert!(d.iter().all(|&v| v == 0.25), "{name}");
        }
    }
    // enc2.conv2 has fan_in 16*9; its sample std should sit near sqrt(2/144).
    let w = params.get("enc2.conv2.weight").unwrap().data();
    let var = w.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / w.len() as f64;
    let expected = 2.0 / 144.0;
    assert!((var / expected - 1.0).abs() < 0.1, "{var} vs {expected}");
}

#[test]
fn builds_are_deterministic() {
    let spec = small(4);
    let a = build_model(&spec, &mut Rng::seed_from_u64(17)).unwrap();
    let b = build_model(&spec, &mut Rng::seed_from_u64(17)).unwrap();
    let c = build_model(&spec, &mut Rng::seed_from_u64(18)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let names_a: Vec<_> = a.trainable_names().collect();
    let names_b: Vec<_> = b.trainable_names().collect();
    assert_eq!(names_a, names_b);
}

/// Per-layer hand count for base 4 (channels 4, 8, 16, 32).
fn hand_count(base: usize) -> usize {
    let ch: Vec<usize> = (0..4).map(|i| base << i).collect();
    let unit = |ci: usize, co: usize| co * ci * 9 + co + 2 * co + co;
    let mut total = 0;
    let mut prev = 1;
    for &c in &ch {
        total += unit(prev, c) + 2 * unit(c, c);
        prev = c;
    }
    for level in (0..3).rev() {
        let c = ch[level];
        total += prev * c * 4 + c; // upsampling
        total += 2 * c * c + c; // projection
        total += 2 * unit(c, c);
        prev = c;
    }
    total + prev + 1
}

#[test]
fn scalar_count_matches_hand_count() {
    let params = build_model(&small(4), &mut Rng::seed_from_u64(1)).unwrap();
    assert_eq!(hand_count(4), 40_977);
    assert_eq!(params.scalar_count(), 40_977);
    let p8 = build_model(&small(8), &mut Rng::seed_from_u64(1)).unwrap();
    assert_eq!(p8.scalar_count(), hand_count(8));
    assert_eq!(p8.len(), params.len());
}

#[test]
fn forward_shapes_and_range() {
    let spec = small(4);
    let model = Model::new(spec.clone()).unwrap();
    let params = build_model(&spec, &mut Rng::seed_from_u64(2)).unwrap();
    for side in [16, 64] {
        let x = image(2, side, 5);
        let mut tape = GradTape::new();
        let fwd = model.forward(&params, &x, Phase::Train, &mut Rng::seed_from_u64(0), &mut tape).unwrap();
        let y = tape.value(fwd.output).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let enc4 = tape.value(fwd.encoder_outputs[3]).unwrap();
        assert_eq!(enc4.shape(), &[2, 32, side / 8, side / 8]);
    }
}

#[test]
fn full_size_default_model_shapes() {
    let spec = ModelSpec::default();
    let model = Model::new(spec.clone()).unwrap();
    let params = build_model(&spec, &mut Rng::seed_from_u64(2)).unwrap();
    let x = image(1, 256, 1);
    let mut tape = GradTape::no_grad();
    let fwd = model.forward(&params, &x, Phase::Train, &mut Rng::seed_from_u64(0), &mut tape).unwrap();
    assert_eq!(tape.value(fwd.encoder_outputs[3]).unwrap().shape(), &[1, 256, 32, 32]);
    let y = tape.value(fwd.output).unwrap();
    assert_eq!(y.shape(), &[1, 1, 256, 256]);
    assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn indivisible_input_fails_before_compute() {
    let spec = small(4);
    let model = Model::new(spec.clone()).unwrap();
    let params = build_model(&spec, &mut Rng::seed_from_u64(2)).unwrap();
    let mut tape = GradTape::new();
    let err = model
        .forward(&params, &Tensor::zeros(vec![1, 1, 60, 64]), Phase::Train, &mut Rng::seed_from_u64(0), &mut tape)
        .err()
        .unwrap();
    assert_eq!(err, NetworkError::Indivisible { h: 60, w: 64, factor: 8 });
    assert_eq!(tape.node_count(), 0);
}

#[test]
fn eval_without_running_stats_is_an_error() {
    let spec = small(4);
    let model = Model::new(spec.clone()).unwrap();
    let params = build_model(&spec, &mut Rng::seed_from_u64(2)).unwrap();
    assert!(model.predict(&params, &image(1, 16, 0)).is_err());
}

#[test]
fn eval_forward_is_repeatable() {
    let spec = small(4);
    let model = Model::new(spec.clone()).unwrap();
    let mut params = build_model(&spec, &mut Rng::seed_from_u64(2)).unwrap();
    let x = image(2, 16, 8);
    let mut tape = GradTape::new();
    let fwd = model.forward(&params, &x, Phase::Train, &mut Rng::seed_from_u64(0), &mut tape).unwrap();
    params.absorb_batch_stats(&fwd.batch_stats);
    let a = model.predict(&params, &x).unwrap();
    let b = model.predict(&params, &x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn skip_connection_carries_signal_and_gradient() {
    let spec = ModelSpec {
        dropout_rate: 0.0,
        ..small(4)
    };
    let model = Model::new(spec.clone()).unwrap();
    let params = build_model(&spec, &mut Rng::seed_from_u64(4)).unwrap();
    let x = image(2, 16, 9);
    let run = |hooks: Hooks| {
        let mut tape = GradTape::new();
        let fwd = model
            .forward_with(&params, &x, Phase::Train, &mut Rng::seed_from_u64(0), &mut tape, hooks)
            .unwrap();
        tape.value(fwd.output).unwrap().clone()
    };
    let plain = run(Hooks::default());
    let cut = run(Hooks {
        zero_skip: Some(0),
        ..Hooks::default()
    });
    assert!(plain.max_abs_diff(&cut) > 0.0);

    let mut tape = GradTape::new();
    let fwd = model.forward(&params, &x, Phase::Train, &mut Rng::seed_from_u64(0), &mut tape).unwrap();
    let target = tape.leaf(Tensor::zeros(x.shape().to_vec()));
    let loss = tape.mse_loss(fwd.output, target).unwrap();
    let grads = fwd.parameter_gradients(&tape.backward(loss).unwrap());
    assert_eq!(grads.len(), params.len());
    let g = grads.get("enc1.conv1.weight").unwrap();
    assert!(g.data().iter().any(|&v| v != 0.0));
}

#[test]
fn residual_block_reduces_to_shortcut() {
    let spec = small(4);
    let model = Model::new(spec.clone()).unwrap();
    let mut params = build_model(&spec, &mut Rng::seed_from_u64(6)).unwrap();
    for (name, t) in params.iter_mut() {
        if name.starts_with("dec") && name.contains(".conv") {
            t.data_mut().fill(0.0);
        }
    }
    let mut tape = GradTape::new();
    let hooks = Hooks {
        bypass_decoder_bn: true,
        ..Hooks::default()
    };
    let fwd = model
        .forward_with(&params, &image(2, 16, 3), Phase::Train, &mut Rng::seed_from_u64(0), &mut tape, hooks)
        .unwrap();
    for (out, proj) in fwd.decoder_outputs.iter().zip(&fwd.decoder_projections) {
        assert_eq!(tape.value(*out).unwrap(), tape.value(*proj).unwrap());
    }
}

#[test]
fn parameter_verification_names_first_offender() {
    let spec = small(4);
    let params = build_model(&spec, &mut Rng::seed_from_u64(0)).unwrap();
    match params.verify(&small(2)) {
        Err(NetworkError::ParameterShape { name, .. }) => assert_eq!(name, "dec1.bn1.beta"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn end_to_end_gradient_check() {
    let report = gradcheck::check_model(11, 12).unwrap();
    for c in &report.checks {
        println!("{:<32} rel err {:.3e}", c.name, c.max_rel_error);
    }
    assert!(report.passed(), "worst: {:?}", report.worst());
}
