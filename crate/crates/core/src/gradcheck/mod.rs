//! Finite-difference verification of every tape operation and of the full
//! network.
//!
//! Op-level checks difference the naive `f64` forward in [`reference`] with
//! central steps of [`OP_STEP`] and compare against the `f32` tape gradient.
//! The end-to-end check differences the real network on a tiny model.

pub mod reference;

use std::collections::BTreeMap;

use rand::{Rng as _, SeedableRng};

use crate::network::{Model, ModelParams, ModelSpec, NetworkError};
use crate::tensor::{BnState, ConvSpec, GradTape, Phase, Tensor, TensorError, TensorId};
use crate::Rng;

/// Central-difference step for the op-level oracle.
pub const OP_STEP: f64 = 1e-3;
/// Maximum relative error accepted for op-level checks.
pub const OP_TOLERANCE: f64 = 1e-3;
/// Central-difference step for the end-to-end check.
pub const MODEL_STEP: f64 = 1e-5;
/// Maximum relative error accepted for the end-to-end model check.
pub const MODEL_TOLERANCE: f64 = 1e-2;

/// Result of checking one input slot of one operation.
#[derive(Debug, Clone)]
pub struct SlotCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl SlotCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checks: Vec<SlotCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(SlotCheck::passed)
    }

    pub fn worst(&self) -> Option<&SlotCheck> {
        self.checks
            .iter()
            .max_by(|a, b| (a.max_rel_error / a.tolerance).total_cmp(&(b.max_rel_error / b.tolerance)))
    }
}

/// `|a - b| / max(|a|, |b|, floor)`, where the floor is a thousandth of the
/// largest gradient magnitude in the slot so near-zero entries are judged on
/// the slot's scale.
pub fn relative_errors(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (scale * 1e-3).max(1e-9);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

type TapeFn = Box<dyn Fn(&mut GradTape, &[TensorId]) -> Result<TensorId, TensorError>>;
type RefFn = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

struct Case {
    name: String,
    slots: Vec<(&'static str, Tensor)>,
    tape_fn: TapeFn,
    ref_fn: RefFn,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn uniform(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
}

/// Values with magnitude in [0.1, 1).
fn away_from_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = rng.random_range(0.1f32..1.0);
        if rng.random::<bool>() {
            mag
        } else {
            -mag
        }
    })
}

/// Distinct values spaced well beyond the difference step.
fn distinct(shape: &[usize], rng: &mut Rng) -> Tensor {
    let len: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), order.iter().map(|&o| o as f32 * 0.05 - 1.0).collect()).expect("shape")
}

fn conv_case(name: &str, dims_in: [usize; 4], spec: ConvSpec, rng: &mut Rng) -> Case {
    let x = uniform(&dims_in, rng);
    let w = uniform(&spec.weight_shape(), rng);
    let b = uniform(&[spec.out_channels], rng);
    Case {
        name: name.to_string(),
        slots: vec![("input", x), ("weight", w), ("bias", b)],
        tape_fn: Box::new(move |t, ids| t.conv2d(ids[0], ids[1], ids[2], spec)),
        ref_fn: Box::new(move |v| reference::conv2d(&v[0], dims_in, &v[1], &v[2], &spec).0),
    }
}

fn op_cases(rng: &mut Rng) -> Vec<Case> {
    let mut cases = vec![
        conv_case("conv2d[d=1]", [2, 2, 6, 6], ConvSpec::same(2, 3, 1), rng),
        conv_case("conv2d[d=2]", [2, 2, 6, 6], ConvSpec::same(2, 3, 2), rng),
        conv_case("conv2d[d=5]", [1, 2, 7, 6], ConvSpec::same(2, 2, 5), rng),
        conv_case("conv2d[1x1]", [2, 3, 4, 4], ConvSpec::pointwise(3, 2), rng),
        conv_case(
            "conv2d[k2,s2]",
            [1, 2, 6, 6],
            ConvSpec {
                kernel: 2,
                stride: 2,
                padding: 0,
                ..ConvSpec::same(2, 3, 1)
            },
            rng,
        ),
    ];

    let spec = ConvSpec::upsample(3, 2);
    let tdims = [2, 3, 3, 3];
    cases.push(Case {
        name: "conv2d_transposed".into(),
        slots: vec![
            ("input", uniform(&tdims, rng)),
            ("weight", uniform(&spec.weight_shape(), rng)),
            ("bias", uniform(&[2], rng)),
        ],
        tape_fn: Box::new(move |t, ids| t.conv2d_transposed(ids[0], ids[1], ids[2], spec)),
        ref_fn: Box::new(move |v| reference::conv_transpose(&v[0], tdims, &v[1], &v[2], 2).0),
    });

    let pdims = [2, 2, 4, 6];
    cases.push(Case {
        name: "max_pool2".into(),
        slots: vec![("input", distinct(&pdims, rng))],
        tape_fn: Box::new(|t, ids| t.max_pool2(ids[0])),
        ref_fn: Box::new(move |v| reference::max_pool2(&v[0], pdims)),
    });

    let bdims = [3, 2, 3, 3];
    let train_state = BnState::new(2);
    cases.push(Case {
        name: "batch_norm[train]".into(),
        slots: vec![
            ("input", uniform(&bdims, rng)),
            ("gamma", uniform(&[2], rng)),
            ("beta", uniform(&[2], rng)),
        ],
        tape_fn: Box::new(move |t, ids| Ok(t.batch_norm(ids[0], ids[1], ids[2], &train_state, Phase::Train)?.0)),
        ref_fn: Box::new(move |v| reference::batch_norm(&v[0], bdims, &v[1], &v[2], None)),
    });

    let eval_state = BnState {
        mean: vec![0.2, -0.3],
        var: vec![0.5, 1.7],
        ready: true,
    };
    let (mean64, var64): (Vec<f64>, Vec<f64>) = (
        eval_state.mean.iter().map(|&v| v as f64).collect(),
        eval_state.var.iter().map(|&v| v as f64).collect(),
    );
    cases.push(Case {
        name: "batch_norm[eval]".into(),
        slots: vec![
            ("input", uniform(&bdims, rng)),
            ("gamma", uniform(&[2], rng)),
            ("beta", uniform(&[2], rng)),
        ],
        tape_fn: Box::new(move |t, ids| Ok(t.batch_norm(ids[0], ids[1], ids[2], &eval_state, Phase::Eval)?.0)),
        ref_fn: Box::new(move |v| reference::batch_norm(&v[0], bdims, &v[1], &v[2], Some((&mean64, &var64)))),
    });

    let rdims = [2, 3, 3, 3];
    cases.push(Case {
        name: "prelu".into(),
        slots: vec![("input", away_from_zero(&rdims, rng)), ("alpha", uniform(&[3], rng))],
        tape_fn: Box::new(|t, ids| t.prelu(ids[0], ids[1])),
        ref_fn: Box::new(move |v| reference::prelu(&v[0], rdims, &v[1])),
    });

    // The mask is replayed from the same seed on both sides; what is under
    // test is the masking and rescaling, not the draw.
    let ddims = [2, 2, 3, 3];
    let seed: u64 = rng.random();
    let rate = 0.3f32;
    let mask: Vec<f64> = {
        let mut r = Rng::seed_from_u64(seed);
        crate::tensor::kernels_dropout_mask(ddims.iter().product(), rate, &mut r)
            .into_iter()
            .map(|v| v as f64)
            .collect()
    };
    cases.push(Case {
        name: "dropout[train]".into(),
        slots: vec![("input", uniform(&ddims, rng))],
        tape_fn: Box::new(move |t, ids| {
            let mut r = Rng::seed_from_u64(seed);
            t.dropout(ids[0], rate, Phase::Train, &mut r)
        }),
        ref_fn: Box::new(move |v| v[0].iter().zip(&mask).map(|(x, m)| x * m).collect()),
    });

    cases.push(Case {
        name: "sigmoid".into(),
        slots: vec![("input", uniform(&[2, 2, 3, 3], rng))],
        tape_fn: Box::new(|t, ids| t.sigmoid(ids[0])),
        ref_fn: Box::new(|v| reference::sigmoid(&v[0])),
    });

    cases.push(Case {
        name: "add".into(),
        slots: vec![("lhs", uniform(&[2, 2, 3, 3], rng)), ("rhs", uniform(&[2, 2, 3, 3], rng))],
        tape_fn: Box::new(|t, ids| t.add(ids[0], ids[1])),
        ref_fn: Box::new(|v| v[0].iter().zip(&v[1]).map(|(a, b)| a + b).collect()),
    });

    let (ca, cb) = ([2, 1, 3, 3], [2, 2, 3, 3]);
    cases.push(Case {
        name: "concat_channels".into(),
        slots: vec![("lhs", uniform(&ca, rng)), ("rhs", uniform(&cb, rng))],
        tape_fn: Box::new(|t, ids| t.concat_channels(ids[0], ids[1])),
        ref_fn: Box::new(move |v| reference::concat_channels(&v[0], ca, &v[1], cb)),
    });

    cases.push(Case {
        name: "mse_loss".into(),
        slots: vec![("pred", uniform(&[2, 1, 3, 3], rng)), ("target", uniform(&[2, 1, 3, 3], rng))],
        tape_fn: Box::new(|t, ids| t.mse_loss(ids[0], ids[1])),
        ref_fn: Box::new(|v| vec![reference::mse(&v[0], &v[1])]),
    });
    cases
}

fn run_case(case: &Case, rng: &mut Rng) -> Result<Vec<SlotCheck>, TensorError> {
    let mut tape = GradTape::new();
    let ids: Vec<TensorId> = case.slots.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = (case.tape_fn)(&mut tape, &ids)?;
    let out_shape = tape.value(out)?.shape().to_vec();
    let target = uniform(&out_shape, rng);
    let target_id = tape.leaf(target.clone());
    let loss = tape.mse_loss(out, target_id)?;
    let grads = tape.backward(loss)?;

    let target64: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
    let base: Vec<Vec<f64>> = case
        .slots
        .iter()
        .map(|(_, t)| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let loss_at = |inputs: &[Vec<f64>]| reference::mse(&(case.ref_fn)(inputs), &target64);

    let mut checks = Vec::new();
    for (slot, (slot_name, tensor)) in case.slots.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(ids[slot]) {
            Some(g) => g.data().iter().map(|&v| v as f64).collect(),
            None => vec![0.0; tensor.len()],
        };
        let mut numeric = Vec::with_capacity(tensor.len());
        let mut inputs = base.clone();
        for i in 0..tensor.len() {
            let orig = inputs[slot][i];
            inputs[slot][i] = orig + OP_STEP;
            let plus = loss_at(&inputs);
            inputs[slot][i] = orig - OP_STEP;
            let minus = loss_at(&inputs);
            inputs[slot][i] = orig;
            numeric.push((plus - minus) / (2.0 * OP_STEP));
        }
        checks.push(SlotCheck {
            name: format!("{}.{}", case.name, slot_name),
            max_rel_error: relative_errors(&analytic, &numeric),
            tolerance: OP_TOLERANCE,
        });
    }
    Ok(checks)
}

/// Checks every differentiable tape operation in every input slot.
pub fn check_ops(seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = Rng::seed_from_u64(seed);
    let cases = op_cases(&mut rng);
    let mut report = GradCheckReport::default();
    for case in &cases {
        report.checks.extend(run_case(case, &mut rng)?);
    }
    Ok(report)
}

/// Spec of the toy network differenced end to end.
pub fn toy_spec() -> ModelSpec {
    ModelSpec {
        base_channels: 2,
        ..ModelSpec::default()
    }
}

fn model_loss(
    model: &Model,
    params: &ModelParams,
    input: &Tensor,
    target: &Tensor,
    seed: u64,
) -> Result<(f64, GradTape, Vec<(String, TensorId)>), NetworkError> {
    let mut tape = GradTape::new();
    let mut rng = Rng::seed_from_u64(seed);
    let fwd = model.forward(params, input, Phase::Train, &mut rng, &mut tape)?;
    let t = tape.leaf(target.clone());
    let loss = tape.mse_loss(fwd.output, t)?;
    let value = tape.value(loss)?.data()[0] as f64;
    let mut bindings = fwd.bindings;
    bindings.push(("__loss".into(), loss));
    Ok((value, tape, bindings))
}

fn reference_loss(spec: &ModelSpec, params: &BTreeMap<String, Vec<f64>>, input: &Tensor, target: &[f64], seed: u64) -> f64 {
    let dims = input.dims4("gradcheck").expect("4-D input");
    let out = reference::model_forward(spec, params, &to_f64(input.data()), dims, &mut Rng::seed_from_u64(seed));
    reference::mse(&out, target)
}

/// Differences `samples` randomly chosen parameter scalars of the toy model
/// (16x16 input, train mode, dropout active with a replayed mask).
///
/// The analytic side is the `f32` tape gradient of the real network; the
/// numeric side differences the `f64` reference forward with step
/// [`MODEL_STEP`]. Tensors whose gradient vanishes identically (conv biases
/// cancelled by a following batch norm) are not sampled.
pub fn check_model(seed: u64, samples: usize) -> Result<GradCheckReport, NetworkError> {
    let spec = toy_spec();
    let model = Model::new(spec.clone())?;
    let mut rng = Rng::seed_from_u64(seed);
    let params = ModelParams::init(&spec, &mut rng);
    let input = Tensor::from_fn(vec![2, 1, 16, 16], |_| rng.random_range(0.0f32..1.0));
    let target = Tensor::from_fn(vec![2, 1, 16, 16], |_| rng.random_range(0.0f32..1.0));
    let target64 = to_f64(target.data());
    let mask_seed: u64 = rng.random();

    let (_, tape, bindings) = model_loss(&model, &params, &input, &target, mask_seed)?;
    let loss_id = bindings.last().expect("loss binding").1;
    let grads = tape.backward(loss_id)?;
    let grad_of = |name: &str| {
        let id = bindings.iter().find(|(n, _)| n == name).expect("bound parameter").1;
        grads.get(id).map(|g| to_f64(g.data()))
    };

    let mut values: BTreeMap<String, Vec<f64>> = params.iter().map(|(n, t)| (n.to_string(), to_f64(t.data()))).collect();
    let all: Vec<(String, Vec<f64>)> = params
        .trainable_names()
        .filter_map(|n| grad_of(n).map(|g| (n.to_string(), g)))
        .collect();
    let peak = |g: &[f64]| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let global = all.iter().map(|(_, g)| peak(g)).fold(0.0, f64::max);
    let live: Vec<&(String, Vec<f64>)> = all.iter().filter(|(_, g)| peak(g) > 1e-4 * global).collect();

    let mut report = GradCheckReport::default();
    for _ in 0..samples {
        let (name, grad) = live[rng.random_range(0..live.len())];
        let scale = peak(grad);
        let candidates: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() >= 0.1 * scale).collect();
        let index = candidates[rng.random_range(0..candidates.len())];

        let base = values[name][index];
        values.get_mut(name).expect("param")[index] = base + MODEL_STEP;
        let plus = reference_loss(&spec, &values, &input, &target64, mask_seed);
        values.get_mut(name).expect("param")[index] = base - MODEL_STEP;
        let minus = reference_loss(&spec, &values, &input, &target64, mask_seed);
        values.get_mut(name).expect("param")[index] = base;
        let numeric = (plus - minus) / (2.0 * MODEL_STEP);
        let analytic = grad[index];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        report.checks.push(SlotCheck {
            name: format!("model.{name}[{index}]"),
            max_rel_error: err,
            tolerance: MODEL_TOLERANCE,
        });
    }
    Ok(report)
}
