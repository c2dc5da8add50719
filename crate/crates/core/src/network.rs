//! The symmetric encoder-decoder denoising network.
//!
//! Encoder block: three sequential 3x3 convolutions at dilations 1, 2 and 5,
//! each followed by batch norm, PReLU and dropout. Blocks are joined by 2x2
//! max pooling and double their channel count up to a cap.
//!
//! Decoder block: transposed-conv upsampling, concatenation with the encoder
//! output at the same resolution, a 1x1 projection, two 3x3 conv units and an
//! additive shortcut from the projection. A final 1x1 convolution and a
//! sigmoid produce the single-channel image.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{
    BatchStats, BnState, ConvSpec, GradTape, Phase, Tensor, TensorError, TensorId, PRELU_INIT,
};
use crate::Rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input {h}x{w} is not divisible by {factor}")]
    Indivisible { h: usize, w: usize, factor: usize },
    #[error("input has {actual} channels, model expects {expected}")]
    InputChannels { expected: usize, actual: usize },
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("unexpected parameter {0}")]
    UnexpectedParameter(String),
    #[error("parameter {name} has shape {actual:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub base_channels: usize,
    pub channel_cap: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub dilations: [usize; 3],
    pub dropout_rate: f32,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_cap: 256,
            encoder_blocks: 4,
            decoder_blocks: 3,
            dilations: [1, 2, 5],
            dropout_rate: 0.3,
            input_channels: 1,
            output_channels: 1,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |msg: String| Err(NetworkError::InvalidSpec(msg));
        if self.base_channels == 0 || self.channel_cap < self.base_channels {
            return bad(format!(
                "base_channels {} must be positive and at most channel_cap {}",
                self.base_channels, self.channel_cap
            ));
        }
        if self.encoder_blocks < 2 {
            return bad(format!("encoder_blocks {} must be at least 2", self.encoder_blocks));
        }
        if self.decoder_blocks + 1 != self.encoder_blocks {
            return bad(format!(
                "decoder_blocks {} must be encoder_blocks - 1 = {}",
                self.decoder_blocks,
                self.encoder_blocks - 1
            ));
        }
        if self.dilations.contains(&0) {
            return bad("dilations must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.input_channels != 1 || self.output_channels != 1 {
            return bad("only single-channel images are supported".into());
        }
        Ok(())
    }

    /// Channel width of each encoder block.
    pub fn channels(&self) -> Vec<usize> {
        (0..self.encoder_blocks)
            .map(|i| (self.base_channels << i).min(self.channel_cap))
            .collect()
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.encoder_blocks - 1)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<(), NetworkError> {
        let factor = self.size_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(factor) || !w.is_multiple_of(factor) {
            return Err(NetworkError::Indivisible { h, w, factor });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    He { fan_in: usize },
    Zero,
    One,
    Slope,
}

#[derive(Debug, Clone, PartialEq)]
struct ParamDef {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Names and shapes of every learnable tensor and batch-norm layer a spec
/// implies, in construction order.
struct Layout {
    params: Vec<ParamDef>,
    bn_layers: Vec<(String, usize)>,
}

impl Layout {
    fn new(spec: &ModelSpec) -> Self {
        let mut layout = Layout {
            params: Vec::new(),
            bn_layers: Vec::new(),
        };
        let ch = spec.channels();
        let mut prev = spec.input_channels;
        for (b, &c) in ch.iter().enumerate() {
            let block = format!("enc{}", b + 1);
            for j in 1..=3 {
                let cin = if j == 1 { prev } else { c };
                layout.conv(&format!("{block}.conv{j}"), ConvSpec::same(cin, c, 1));
                layout.unit(&block, j, c);
            }
            prev = c;
        }
        for d in 1..=spec.decoder_blocks {
            let level = spec.encoder_blocks - 1 - d;
            let c = ch[level];
            let block = format!("dec{d}");
            layout.conv(&format!("{block}.up"), ConvSpec::upsample(prev, c));
            layout.conv(&format!("{block}.proj"), ConvSpec::pointwise(2 * c, c));
            for j in 1..=2 {
                layout.conv(&format!("{block}.conv{j}"), ConvSpec::same(c, c, 1));
                layout.unit(&block, j, c);
            }
            prev = c;
        }
        layout.conv("head", ConvSpec::pointwise(prev, spec.output_channels));
        layout
    }

    fn conv(&mut self, prefix: &str, spec: ConvSpec) {
        let fan_in = if spec.transposed {
            spec.in_channels
        } else {
            spec.in_channels * spec.kernel * spec.kernel
        };
        self.params.push(ParamDef {
            name: format!("{prefix}.weight"),
            shape: spec.weight_shape().to_vec(),
            init: Init::He { fan_in },
        });
        self.params.push(ParamDef {
            name: format!("{prefix}.bias"),
            shape: vec![spec.out_channels],
            init: Init::Zero,
        });
    }

    fn unit(&mut self, block: &str, j: usize, c: usize) {
        let bn = format!("{block}.bn{j}");
        self.params.push(ParamDef {
            name: format!("{bn}.gamma"),
            shape: vec![c],
            init: Init::One,
        });
        self.params.push(ParamDef {
            name: format!("{bn}.beta"),
            shape: vec![c],
            init: Init::Zero,
        });
        self.params.push(ParamDef {
            name: format!("{block}.prelu{j}.alpha"),
            shape: vec![c],
            init: Init::Slope,
        });
        self.bn_layers.push((bn, c));
    }
}

/// Named learnable tensors plus batch-norm running statistics.
///
/// Iteration is lexicographic by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
    bn: BTreeMap<String, BnState>,
}

impl ModelParams {
    /// He-normal conv weights, zero biases, unit gamma, zero beta, PReLU
    /// slopes at [`PRELU_INIT`].
    pub fn init(spec: &ModelSpec, rng: &mut Rng) -> Self {
        let layout = Layout::new(spec);
        let mut tensors = BTreeMap::new();
        for def in layout.params {
            let t = match def.init {
                Init::He { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(def.shape, |_| {
                        let z: f64 = StandardNormal.sample(rng);
                        (z * std) as f32
                    })
                }
                Init::Zero => Tensor::zeros(def.shape),
                Init::One => Tensor::full(def.shape, 1.0),
                Init::Slope => Tensor::full(def.shape, PRELU_INIT),
            };
            tensors.insert(def.name, t);
        }
        let bn = layout
            .bn_layers
            .into_iter()
            .map(|(name, c)| (name, BnState::new(c)))
            .collect();
        Self { tensors, bn }
    }

    /// Assembles parameters from raw parts and checks them against `spec`.
    pub fn from_parts(
        spec: &ModelSpec,
        tensors: BTreeMap<String, Tensor>,
        bn: BTreeMap<String, BnState>,
    ) -> Result<Self, NetworkError> {
        let params = Self { tensors, bn };
        params.verify(spec)?;
        Ok(params)
    }

    /// Checks that names and shapes are exactly those implied by `spec`.
    /// Reports the first offending parameter in lexicographic order.
    pub fn verify(&self, spec: &ModelSpec) -> Result<(), NetworkError> {
        let layout = Layout::new(spec);
        let mut expected: BTreeMap<String, Vec<usize>> = layout
            .params
            .iter()
            .map(|d| (d.name.clone(), d.shape.clone()))
            .collect();
        for (name, c) in &layout.bn_layers {
            expected.insert(format!("{name}.running_mean"), vec![*c]);
        }
        let mut actual: BTreeMap<String, Vec<usize>> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        for (n, s) in &self.bn {
            if s.mean.len() != s.var.len() {
                return Err(NetworkError::ParameterShape {
                    name: format!("{n}.running_var"),
                    expected: vec![s.mean.len()],
                    actual: vec![s.var.len()],
                });
            }
            actual.insert(format!("{n}.running_mean"), vec![s.mean.len()]);
        }
        for (name, shape) in &expected {
            match actual.get(name) {
                None => return Err(NetworkError::MissingParameter(name.to_string())),
                Some(a) if a != shape => {
                    return Err(NetworkError::ParameterShape {
                        name: name.to_string(),
                        expected: shape.clone(),
                        actual: a.clone(),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = actual.keys().find(|n| !expected.contains_key(n.as_str())) {
            return Err(NetworkError::UnexpectedParameter(extra.to_string()));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Learnable tensors in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn bn_state(&self, layer: &str) -> Option<&BnState> {
        self.bn.get(layer)
    }

    pub fn bn_states(&self) -> impl Iterator<Item = (&str, &BnState)> {
        self.bn.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn bn_states_mut(&mut self) -> impl Iterator<Item = (&str, &mut BnState)> {
        self.bn.iter_mut().map(|(n, s)| (n.as_str(), s))
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn absorb_batch_stats(&mut self, stats: &[(String, BatchStats)]) {
        for (layer, s) in stats {
            if let Some(state) = self.bn.get_mut(layer) {
                state.absorb(s);
            }
        }
    }

    /// `(name, tensor, gradient)` triples in lexicographic order.
    pub fn with_gradients<'a>(
        &'a self,
        grads: &'a BTreeMap<String, Tensor>,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor, Option<&'a Tensor>)> {
        self.tensors
            .iter()
            .map(move |(n, t)| (n.as_str(), t, grads.get(n)))
    }
}

/// Builds freshly initialized parameters for `spec`.
pub fn build_model(spec: &ModelSpec, rng: &mut Rng) -> Result<ModelParams, NetworkError> {
    spec.validate()?;
    Ok(ModelParams::init(spec, rng))
}

/// Test hooks that alter the forward wiring.
#[derive(Debug, Clone, Copy, Default)]
pub struct Hooks {
    /// Zero the skip copy of this encoder block (0-based) before the decoder
    /// concatenates it.
    pub zero_skip: Option<usize>,
    /// Skip batch norm inside decoder conv units.
    pub bypass_decoder_bn: bool,
}

/// Handles produced by one forward pass.
pub struct Forward {
    pub output: TensorId,
    /// Tape leaf for every learnable tensor, by name.
    pub bindings: Vec<(String, TensorId)>,
    /// Encoder block outputs before pooling.
    pub encoder_outputs: Vec<TensorId>,
    /// Decoder projection outputs (the residual shortcut operand).
    pub decoder_projections: Vec<TensorId>,
    pub decoder_outputs: Vec<TensorId>,
    /// Train-mode batch statistics per batch-norm layer.
    pub batch_stats: Vec<(String, BatchStats)>,
}

impl Forward {
    /// Gradients of every learnable tensor, by name.
    pub fn parameter_gradients(&self, grads: &crate::tensor::Gradients) -> BTreeMap<String, Tensor> {
        self.bindings
            .iter()
            .filter_map(|(n, id)| grads.get(*id).map(|g| (n.clone(), g.clone())))
            .collect()
    }
}

struct Pass<'a, 'r> {
    spec: &'a ModelSpec,
    params: &'a ModelParams,
    bound: BTreeMap<&'a str, TensorId>,
    phase: Phase,
    rng: &'r mut Rng,
    hooks: Hooks,
    stats: Vec<(String, BatchStats)>,
}

impl Pass<'_, '_> {
    fn p(&self, name: &str) -> Result<TensorId, NetworkError> {
        self.bound
            .get(name)
            .copied()
            .ok_or_else(|| NetworkError::MissingParameter(name.to_string()))
    }

    fn conv(&self, tape: &mut GradTape, prefix: &str, x: TensorId, spec: ConvSpec) -> Result<TensorId, NetworkError> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        Ok(if spec.transposed {
            tape.conv2d_transposed(x, w, b, spec)?
        } else {
            tape.conv2d(x, w, b, spec)?
        })
    }

    /// conv -> batch norm -> PReLU -> dropout.
    fn unit(
        &mut self,
        tape: &mut GradTape,
        block: &str,
        j: usize,
        x: TensorId,
        spec: ConvSpec,
        use_bn: bool,
    ) -> Result<TensorId, NetworkError> {
        let mut y = self.conv(tape, &format!("{block}.conv{j}"), x, spec)?;
        if use_bn {
            let layer = format!("{block}.bn{j}");
            let state = self
                .params
                .bn_state(&layer)
                .ok_or_else(|| NetworkError::MissingParameter(layer.clone()))?;
            let gamma = self.p(&format!("{layer}.gamma"))?;
            let beta = self.p(&format!("{layer}.beta"))?;
            let (out, stats) = tape.batch_norm(y, gamma, beta, state, self.phase)?;
            if let Some(s) = stats {
                self.stats.push((layer, s));
            }
            y = out;
        }
        y = tape.prelu(y, self.p(&format!("{block}.prelu{j}.alpha"))?)?;
        Ok(tape.dropout(y, self.spec.dropout_rate, self.phase, self.rng)?)
    }
}

/// The network for one [`ModelSpec`].
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self, NetworkError> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn forward(
        &self,
        params: &ModelParams,
        input: &Tensor,
        phase: Phase,
        rng: &mut Rng,
        tape: &mut GradTape,
    ) -> Result<Forward, NetworkError> {
        self.forward_with(params, input, phase, rng, tape, Hooks::default())
    }

    pub fn forward_with(
        &self,
        params: &ModelParams,
        input: &Tensor,
        phase: Phase,
        rng: &mut Rng,
        tape: &mut GradTape,
        hooks: Hooks,
    ) -> Result<Forward, NetworkError> {
        let [_, c, h, w] = input.dims4("forward")?;
        if c != self.spec.input_channels {
            return Err(NetworkError::InputChannels {
                expected: self.spec.input_channels,
                actual: c,
            });
        }
        self.spec.check_input(h, w)?;

        let mut bindings = Vec::with_capacity(params.len());
        let mut bound = BTreeMap::new();
        for (name, t) in params.iter() {
            let id = tape.leaf(t.clone());
            bindings.push((name.to_string(), id));
            bound.insert(name, id);
        }
        let mut pass = Pass {
            spec: &self.spec,
            params,
            bound,
            phase,
            rng,
            hooks,
            stats: Vec::new(),
        };

        let ch = self.spec.channels();
        let mut x = tape.leaf(input.clone());
        let mut prev = self.spec.input_channels;
        let mut encoder_outputs = Vec::with_capacity(ch.len());
        for (b, &c) in ch.iter().enumerate() {
            if b > 0 {
                x = tape.max_pool2(x)?;
            }
            let block = format!("enc{}", b + 1);
            for (j, &d) in self.spec.dilations.iter().enumerate() {
                let cin = if j == 0 { prev } else { c };
                x = pass.unit(tape, &block, j + 1, x, ConvSpec::same(cin, c, d), true)?;
            }
            encoder_outputs.push(x);
            prev = c;
        }

        let mut decoder_projections = Vec::new();
        let mut decoder_outputs = Vec::new();
        for d in 1..=self.spec.decoder_blocks {
            let level = self.spec.encoder_blocks - 1 - d;
            let c = ch[level];
            let block = format!("dec{d}");
            let up = pass.conv(tape, &format!("{block}.up"), x, ConvSpec::upsample(prev, c))?;
            let mut skip = encoder_outputs[level];
            if pass.hooks.zero_skip == Some(level) {
                let shape = tape.value(skip)?.shape().to_vec();
                skip = tape.leaf(Tensor::zeros(shape));
            }
            let fused = tape.concat_channels(skip, up)?;
            let proj = pass.conv(tape, &format!("{block}.proj"), fused, ConvSpec::pointwise(2 * c, c))?;
            let use_bn = !pass.hooks.bypass_decoder_bn;
            let mut y = proj;
            for j in 1..=2 {
                y = pass.unit(tape, &block, j, y, ConvSpec::same(c, c, 1), use_bn)?;
            }
            x = tape.add(y, proj)?;
            decoder_projections.push(proj);
            decoder_outputs.push(x);
            prev = c;
        }

        let logits = pass.conv(tape, "head", x, ConvSpec::pointwise(prev, self.spec.output_channels))?;
        let output = tape.sigmoid(logits)?;
        Ok(Forward {
            output,
            bindings,
            encoder_outputs,
            decoder_projections,
            decoder_outputs,
            batch_stats: pass.stats,
        })
    }

    /// Eval-mode inference without gradient recording.
    pub fn predict(&self, params: &ModelParams, input: &Tensor) -> Result<Tensor, NetworkError> {
        let mut tape = GradTape::no_grad();
        // Eval mode never draws from the generator.
        let mut rng = <Rng as rand::SeedableRng>::seed_from_u64(0);
        let fwd = self.forward(params, input, Phase::Eval, &mut rng, &mut tape)?;
        Ok(tape.value(fwd.output)?.clone())
    }
}
