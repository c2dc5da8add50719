use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::kernels::{self, ConvSpec, BN_MOMENTUM};
use super::{Phase, Result, Tensor, TensorError};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId {
    tape: u64,
    index: usize,
}

/// Running mean/variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    /// False until a train step or a checkpoint has populated the statistics.
    pub ready: bool,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            ready: false,
        }
    }

    /// Exponential moving average update with [`BN_MOMENTUM`].
    pub fn absorb(&mut self, stats: &BatchStats) {
        for (r, &b) in self.mean.iter_mut().zip(&stats.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&stats.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        self.ready = true;
    }
}

/// Per-channel batch statistics produced by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

enum Op {
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        spec: ConvSpec,
    },
    ConvTranspose {
        x: usize,
        w: usize,
        b: usize,
        out_channels: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f32>,
        var: Vec<f32>,
        batch_stats: bool,
    },
    Prelu {
        x: usize,
        alpha: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<f32>,
    },
    Sigmoid {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Mse {
        pred: usize,
        target: usize,
    },
}

struct Node {
    op: Op,
    output: usize,
}

/// Records forward operations so gradients can be replayed in reverse.
///
/// Every value produced on the tape is kept until the tape is dropped. A tape
/// built with [`GradTape::no_grad`] stores values but no backward nodes.
pub struct GradTape {
    id: u64,
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Tape for inference: values only, nothing to differentiate.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded backward nodes.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.values.push(tensor);
        self.id_of(self.values.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> Result<&Tensor> {
        self.index(id).map(|i| &self.values[i])
    }

    fn id_of(&self, index: usize) -> TensorId {
        TensorId {
            tape: self.id,
            index,
        }
    }

    fn index(&self, id: TensorId) -> Result<usize> {
        if id.tape == self.id && id.index < self.values.len() {
            Ok(id.index)
        } else {
            Err(TensorError::NotOnTape)
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<TensorId> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.values.push(value);
        let output = self.values.len() - 1;
        if self.recording {
            self.nodes.push(Node { op, output });
        }
        Ok(self.id_of(output))
    }

    fn expect_shape(op: &'static str, what: &str, expected: &[usize], actual: &[usize]) -> Result<()> {
        if expected.len() != actual.len() {
            return Err(TensorError::Rank {
                op,
                expected: expected.len(),
                actual: actual.to_vec(),
            });
        }
        for (axis, (&e, &a)) in expected.iter().zip(actual).enumerate() {
            if e != a {
                return Err(TensorError::ShapeMismatch {
                    op,
                    dim: format!("{what} axis {axis}"),
                    expected: e,
                    actual: a,
                });
            }
        }
        Ok(())
    }

    /// Zero-padded, dilated cross-correlation.
    pub fn conv2d(&mut self, x: TensorId, weight: TensorId, bias: TensorId, spec: ConvSpec) -> Result<TensorId> {
        const OP: &str = "conv2d";
        spec.validate(OP)?;
        if spec.transposed {
            return Err(TensorError::Unsupported {
                op: OP,
                reason: "spec is marked transposed; use conv2d_transposed".into(),
            });
        }
        let (xi, wi, bi) = (self.index(x)?, self.index(weight)?, self.index(bias)?);
        let dims = self.values[xi].dims4(OP)?;
        if dims[1] != spec.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "input channels".into(),
                expected: spec.in_channels,
                actual: dims[1],
            });
        }
        Self::expect_shape(OP, "weight", &spec.weight_shape(), self.values[wi].shape())?;
        Self::expect_shape(OP, "bias", &[spec.out_channels], self.values[bi].shape())?;
        if !self.values[xi].is_finite() {
            return Err(TensorError::NonFinite { op: OP });
        }
        let (out, ho, wo) = kernels::conv2d_forward(
            self.values[xi].data(),
            dims,
            self.values[wi].data(),
            self.values[bi].data(),
            &spec,
        )?;
        let value = Tensor::new(vec![dims[0], spec.out_channels, ho, wo], out)?;
        self.push(OP, value, Op::Conv2d { x: xi, w: wi, b: bi, spec })
    }

    /// Kernel-2 stride-2 transposed convolution doubling height and width.
    pub fn conv2d_transposed(
        &mut self,
        x: TensorId,
        weight: TensorId,
        bias: TensorId,
        spec: ConvSpec,
    ) -> Result<TensorId> {
        const OP: &str = "conv2d_transposed";
        if !spec.transposed {
            return Err(TensorError::Unsupported {
                op: OP,
                reason: "spec is not marked transposed".into(),
            });
        }
        spec.validate(OP)?;
        let (xi, wi, bi) = (self.index(x)?, self.index(weight)?, self.index(bias)?);
        let dims = self.values[xi].dims4(OP)?;
        if dims[1] != spec.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "input channels".into(),
                expected: spec.in_channels,
                actual: dims[1],
            });
        }
        Self::expect_shape(OP, "weight", &spec.weight_shape(), self.values[wi].shape())?;
        Self::expect_shape(OP, "bias", &[spec.out_channels], self.values[bi].shape())?;
        if !self.values[xi].is_finite() {
            return Err(TensorError::NonFinite { op: OP });
        }
        let out = kernels::conv_transpose_forward(
            self.values[xi].data(),
            dims,
            self.values[wi].data(),
            self.values[bi].data(),
            spec.out_channels,
        );
        let value = Tensor::new(vec![dims[0], spec.out_channels, 2 * dims[2], 2 * dims[3]], out)?;
        self.push(
            OP,
            value,
            Op::ConvTranspose {
                x: xi,
                w: wi,
                b: bi,
                out_channels: spec.out_channels,
            },
        )
    }

    pub fn max_pool2(&mut self, x: TensorId) -> Result<TensorId> {
        const OP: &str = "max_pool2";
        let xi = self.index(x)?;
        let [n, c, h, w] = self.values[xi].dims4(OP)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::OddSpatial { h, w });
        }
        let (out, argmax) = kernels::max_pool2_forward(self.values[xi].data(), [n, c, h, w]);
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        self.push(OP, value, Op::MaxPool { x: xi, argmax })
    }

    /// Per-channel batch normalization followed by `gamma * x + beta`.
    ///
    /// Train mode normalizes by the batch statistics and returns them so the
    /// caller can fold them into `state`; eval mode uses `state` directly.
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        state: &BnState,
        phase: Phase,
    ) -> Result<(TensorId, Option<BatchStats>)> {
        const OP: &str = "batch_norm";
        let (xi, gi, bi) = (self.index(x)?, self.index(gamma)?, self.index(beta)?);
        let dims = self.values[xi].dims4(OP)?;
        let c = dims[1];
        Self::expect_shape(OP, "gamma", &[c], self.values[gi].shape())?;
        Self::expect_shape(OP, "beta", &[c], self.values[bi].shape())?;
        let (mean, var, stats) = match phase {
            Phase::Train => {
                let per_channel = dims[0] * dims[2] * dims[3];
                if per_channel < 2 {
                    return Err(TensorError::BatchTooSmall(per_channel));
                }
                let (mean, var) = kernels::channel_moments(self.values[xi].data(), dims);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            Phase::Eval => {
                if !state.ready {
                    return Err(TensorError::MissingRunningStats);
                }
                Self::expect_shape(OP, "running mean", &[c], &[state.mean.len()])?;
                (state.mean.clone(), state.var.clone(), None)
            }
        };
        let (out, xhat) = kernels::batch_norm_apply(
            self.values[xi].data(),
            dims,
            &mean,
            &var,
            self.values[gi].data(),
            self.values[bi].data(),
        );
        let value = Tensor::new(dims.to_vec(), out)?;
        let id = self.push(
            OP,
            value,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat: if self.recording { xhat } else { Vec::new() },
                var,
                batch_stats: phase == Phase::Train,
            },
        )?;
        Ok((id, stats))
    }

    pub fn prelu(&mut self, x: TensorId, alpha: TensorId) -> Result<TensorId> {
        const OP: &str = "prelu";
        let (xi, ai) = (self.index(x)?, self.index(alpha)?);
        let dims = self.values[xi].dims4(OP)?;
        Self::expect_shape(OP, "alpha", &[dims[1]], self.values[ai].shape())?;
        let out = kernels::prelu_forward(self.values[xi].data(), dims, self.values[ai].data());
        let value = Tensor::new(dims.to_vec(), out)?;
        self.push(OP, value, Op::Prelu { x: xi, alpha: ai })
    }

    /// Inverted dropout. Identity in eval mode or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: TensorId, rate: f32, phase: Phase, rng: &mut R) -> Result<TensorId> {
        const OP: &str = "dropout";
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidRate(rate));
        }
        let xi = self.index(x)?;
        if phase == Phase::Eval || rate == 0.0 {
            return Ok(x);
        }
        let mask = kernels::dropout_mask(self.values[xi].len(), rate, rng);
        let input = &self.values[xi];
        let out = input.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(input.shape().to_vec(), out)?;
        self.push(OP, value, Op::Dropout { x: xi, mask })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let xi = self.index(x)?;
        let input = &self.values[xi];
        let out = input.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let value = Tensor::new(input.shape().to_vec(), out)?;
        self.push("sigmoid", value, Op::Sigmoid { x: xi })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        const OP: &str = "add";
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        Self::expect_shape(OP, "rhs", self.values[ai].shape(), self.values[bi].shape())?;
        let out = self.values[ai]
            .data()
            .iter()
            .zip(self.values[bi].data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.values[ai].shape().to_vec(), out)?;
        self.push(OP, value, Op::Add { a: ai, b: bi })
    }

    /// Concatenates along the channel axis: `a` channels first, then `b`.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        const OP: &str = "concat_channels";
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let [n, ca, h, w] = self.values[ai].dims4(OP)?;
        let [nb, cb, hb, wb] = self.values[bi].dims4(OP)?;
        Self::expect_shape(OP, "rhs (N,_,H,W)", &[n, h, w], &[nb, hb, wb])?;
        let plane = h * w;
        let (da, db) = (self.values[ai].data(), self.values[bi].data());
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            out.extend_from_slice(&da[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&db[s * cb * plane..(s + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        self.push(OP, value, Op::Concat { a: ai, b: bi })
    }

    /// Mean of squared differences over every element of the batch.
    pub fn mse_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId> {
        const OP: &str = "mse_loss";
        let (pi, ti) = (self.index(pred)?, self.index(target)?);
        Self::expect_shape(OP, "target", self.values[pi].shape(), self.values[ti].shape())?;
        let (p, t) = (self.values[pi].data(), self.values[ti].data());
        let sum: f64 = p.iter().zip(t).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
        let value = Tensor::scalar((sum / p.len() as f64) as f32);
        self.push(OP, value, Op::Mse { pred: pi, target: ti })
    }

    /// Reverse-mode sweep from a scalar `loss`, summing gradients at fan-out.
    ///
    /// Values with no path to `loss` have no entry in the result.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        let li = self.index(loss)?;
        if self.values[li].len() != 1 {
            return Err(TensorError::NotScalar(self.values[li].shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.values.len()];
        grads[li] = Some(vec![1.0]);
        for node in self.nodes.iter().rev() {
            if node.output > li {
                continue;
            }
            let Some(g) = grads[node.output].take() else {
                continue;
            };
            for (target, delta) in self.node_backward(node, &g)? {
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
            grads[node.output] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| {
                g.map(|data| {
                    let t = Tensor::new(self.values[i].shape().to_vec(), data).expect("gradient shape");
                    (i, t)
                })
            })
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }

    fn node_backward(&self, node: &Node, g: &[f32]) -> Result<Vec<(usize, Vec<f32>)>> {
        let v = |i: usize| &self.values[i];
        Ok(match &node.op {
            Op::Conv2d { x, w, b, spec } => {
                let dims = v(*x).dims4("conv2d")?;
                let gr = kernels::conv2d_backward(v(*x).data(), dims, v(*w).data(), spec, g)?;
                vec![(*x, gr.input), (*w, gr.weight), (*b, gr.bias)]
            }
            Op::ConvTranspose { x, w, b, out_channels } => {
                let dims = v(*x).dims4("conv2d_transposed")?;
                let gr = kernels::conv_transpose_backward(v(*x).data(), dims, v(*w).data(), *out_channels, g);
                vec![(*x, gr.input), (*w, gr.weight), (*b, gr.bias)]
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0f32; v(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] += gv;
                }
                vec![(*x, gx)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                var,
                batch_stats,
            } => {
                let dims = v(*x).dims4("batch_norm")?;
                let gr = kernels::batch_norm_backward(g, xhat, dims, var, v(*gamma).data(), *batch_stats);
                vec![(*x, gr.input), (*gamma, gr.gamma), (*beta, gr.beta)]
            }
            Op::Prelu { x, alpha } => {
                let dims = v(*x).dims4("prelu")?;
                let (gx, ga) = kernels::prelu_backward(v(*x).data(), dims, v(*alpha).data(), g);
                vec![(*x, gx), (*alpha, ga)]
            }
            Op::Dropout { x, mask } => vec![(*x, g.iter().zip(mask).map(|(a, m)| a * m).collect())],
            Op::Sigmoid { x } => {
                let out = v(node.output).data();
                vec![(*x, g.iter().zip(out).map(|(gv, s)| gv * s * (1.0 - s)).collect())]
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Concat { a, b } => {
                let [n, ca, h, w] = v(*a).dims4("concat_channels")?;
                let cb = v(*b).shape()[1];
                let plane = h * w;
                let c = ca + cb;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for s in 0..n {
                    let chunk = &g[s * c * plane..(s + 1) * c * plane];
                    ga.extend_from_slice(&chunk[..ca * plane]);
                    gb.extend_from_slice(&chunk[ca * plane..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Mse { pred, target } => {
                let (p, t) = (v(*pred).data(), v(*target).data());
                let scale = 2.0 * g[0] as f64 / p.len() as f64;
                let gp: Vec<f32> = p.iter().zip(t).map(|(&a, &b)| (scale * (a - b) as f64) as f32).collect();
                let gt = gp.iter().map(|v| -v).collect();
                vec![(*pred, gp), (*target, gt)]
            }
        })
    }
}

/// Gradients keyed by the tape values they belong to.
pub struct Gradients {
    tape: u64,
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        if id.tape != self.tape {
            return None;
        }
        self.grads.get(&id.index)
    }
}
