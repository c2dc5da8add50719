//! Training protocol: Adam on the MSE loss with a step-halving learning rate,
//! early stopping on validation loss, and best-model checkpoints.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng as _, SeedableRng};

use crate::data::{BatchIter, DataError, SamplePair};
use crate::metrics::{self, MetricError, SsimConfig};
use crate::network::{build_model, Model, ModelParams, ModelSpec, NetworkError};
use crate::tensor::{GradTape, Phase, Tensor};
use crate::Rng;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CheckpointError};

pub const LOG_HEADER: &str = "epoch,lr,train_mse,val_mse,val_psnr,val_ssim,stopped";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("sample {id} is {actual:?}, training expects {expected:?}")]
    ImageSize {
        id: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("no gradient for parameter {0}")]
    MissingGradient(String),
    #[error("non-finite gradient in {name} at step {step}")]
    NonFiniteGradient { name: String, step: u64 },
    #[error("non-finite training loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        Self::Network(e.into())
    }
}

impl TrainError {
    /// Numeric blow-ups, as opposed to bad input or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::NonFiniteGradient { .. }
                | Self::NonFiniteLoss { .. }
                | Self::Network(NetworkError::Tensor(crate::tensor::TensorError::NonFinite { .. }))
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// Epochs between learning-rate halvings.
    pub lr_halve_every: usize,
    pub batch_size: usize,
    /// Applied to the model spec being trained.
    pub dropout_rate: f32,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub image_size: (usize, usize),
    /// Random rotation, scale and flips on training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            lr_halve_every: 3,
            batch_size: 8,
            dropout_rate: 0.3,
            early_stop_patience: 5,
            max_epochs: 30,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            image_size: (256, 256),
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return bad(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if self.lr_halve_every == 0 {
            return bad("lr_halve_every must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return bad(format!("image_size {:?} is empty", self.image_size));
        }
        Ok(())
    }
}

/// `initial_lr * 0.5^floor(epoch / lr_halve_every)`, epochs counted from 0.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let halvings = (epoch / cfg.lr_halve_every).min(i32::MAX as usize) as i32;
    cfg.initial_lr * 0.5f64.powi(halvings)
}

/// Validation-loss early stopping: an epoch improves when its loss is
/// strictly below the best so far, and stop is signaled once `patience`
/// consecutive epochs fail to improve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub best: f64,
    /// Epochs since the last improvement.
    pub wait: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub improved: bool,
    pub stop: bool,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        Self {
            best: f64::INFINITY,
            wait: 0,
        }
    }
}

impl EarlyStopping {
    pub fn observe(&mut self, loss: f64, patience: usize) -> Verdict {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        Verdict {
            improved,
            stop: self.wait >= patience,
        }
    }
}

/// First and second moment estimates, aligned by name with the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every parameter. Gradients are checked
/// in full before anything is modified.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    adam: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let step = adam.step + 1;
    for (name, t, g) in params.with_gradients(grads) {
        let g = g.ok_or_else(|| TrainError::MissingGradient(name.to_string()))?;
        if g.shape() != t.shape() {
            return Err(NetworkError::ParameterShape {
                name: name.to_string(),
                expected: t.shape().to_vec(),
                actual: g.shape().to_vec(),
            }
            .into());
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient {
                name: name.to_string(),
                step,
            });
        }
    }
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powf(step as f64);
    let c2 = 1.0 - b2.powf(step as f64);
    for (name, t) in params.iter_mut() {
        let g = &grads[name];
        let m = adam.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(t.shape().to_vec()));
        let v = adam.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(t.shape().to_vec()));
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, p) in t.data_mut().iter_mut().enumerate() {
            let gi = g.data()[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
            *p = (*p as f64 - update) as f32;
        }
    }
    adam.step = step;
    Ok(())
}

/// Mutable training state carried across epochs and stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub adam: AdamState,
    pub early_stop: EarlyStopping,
    /// Source of every shuffle, augmentation and dropout draw.
    pub rng: Rng,
}

impl TrainState {
    pub fn new(params: &ModelParams, seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            epoch: 0,
            adam: AdamState::new(params),
            early_stop: EarlyStopping::default(),
            rng,
        }
    }

    pub fn best_val_loss(&self) -> f64 {
        self.early_stop.best
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.early_stop.wait
    }
}

/// Outcome of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub improved: bool,
    pub stopped: bool,
}

impl EpochReport {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.lr, self.train_mse, self.val_mse, self.val_psnr, self.val_ssim, self.stopped
        )
    }
}

impl std::fmt::Display for EpochReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch {:>3}  lr {:.3e}  train mse {:.6}  val mse {:.6}  psnr {:.3} dB  ssim {:.4}{}{}",
            self.epoch,
            self.lr,
            self.train_mse,
            self.val_mse,
            self.val_psnr,
            self.val_ssim,
            if self.improved { "  *" } else { "" },
            if self.stopped { "  early stop" } else { "" }
        )
    }
}

/// Result of [`Trainer::fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub reports: Vec<EpochReport>,
    /// Parameters after the last epoch run; the checkpoint holds the best.
    pub params: ModelParams,
    pub state: TrainState,
    pub early_stopped: bool,
}

pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    ssim: SsimConfig,
    checkpoint: Option<PathBuf>,
    log: Option<PathBuf>,
}

impl Trainer {
    /// The model is trained with `cfg.dropout_rate` in place of the spec's.
    pub fn new(spec: ModelSpec, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let spec = ModelSpec {
            dropout_rate: cfg.dropout_rate,
            ..spec
        };
        let (h, w) = cfg.image_size;
        spec.check_input(h, w)?;
        Ok(Self {
            model: Model::new(spec)?,
            cfg,
            ssim: SsimConfig::default(),
            checkpoint: None,
            log: None,
        })
    }

    /// Writes the best model here whenever validation loss improves.
    pub fn with_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint = Some(path.into());
        self
    }

    /// Appends one CSV row per epoch here.
    pub fn with_log(mut self, path: impl Into<PathBuf>) -> Self {
        self.log = Some(path.into());
        self
    }

    pub fn with_ssim(mut self, ssim: SsimConfig) -> Self {
        self.ssim = ssim;
        self
    }

    pub fn spec(&self) -> &ModelSpec {
        self.model.spec()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Fresh parameters and state, both derived from `cfg.seed`.
    pub fn init(&self) -> Result<(ModelParams, TrainState), TrainError> {
        let params = build_model(self.spec(), &mut Rng::seed_from_u64(self.cfg.seed))?;
        let state = TrainState::new(&params, self.cfg.seed);
        Ok((params, state))
    }

    fn check_set(&self, set: &[SamplePair], which: &'static str) -> Result<(), TrainError> {
        if set.is_empty() {
            return Err(TrainError::EmptySet(which));
        }
        for p in set {
            let actual = p.dims()?;
            if actual != self.cfg.image_size {
                return Err(TrainError::ImageSize {
                    id: p.id.clone(),
                    expected: self.cfg.image_size,
                    actual,
                });
            }
        }
        Ok(())
    }

    /// One pass over shuffled training batches followed by an eval-mode
    /// validation pass. Writes a checkpoint when validation MSE improves.
    pub fn train_epoch(
        &self,
        params: &mut ModelParams,
        state: &mut TrainState,
        train: &[SamplePair],
        val: &[SamplePair],
    ) -> Result<EpochReport, TrainError> {
        self.check_set(train, "training")?;
        self.check_set(val, "validation")?;
        let lr = lr_schedule(state.epoch, &self.cfg);
        let mut data_rng = Rng::seed_from_u64(state.rng.random());
        let mut dropout_rng = Rng::seed_from_u64(state.rng.random());

        let mut total = 0.0;
        let batches = BatchIter::new(train, self.cfg.batch_size, self.cfg.augment.then_some(&mut data_rng));
        for (b, batch) in batches.enumerate() {
            let batch = batch?;
            let mut tape = GradTape::new();
            let fwd = self.model.forward(params, &batch.noisy, Phase::Train, &mut dropout_rng, &mut tape)?;
            let target = tape.leaf(batch.clean);
            let loss = tape.mse_loss(fwd.output, target)?;
            let value = tape.value(loss)?.data()[0] as f64;
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: state.epoch + 1,
                    batch: b,
                });
            }
            let grads = fwd.parameter_gradients(&tape.backward(loss)?);
            adam_step(params, &grads, &mut state.adam, lr, &self.cfg)?;
            params.absorb_batch_stats(&fwd.batch_stats);
            total += value * batch.ids.len() as f64;
        }
        let train_mse = total / train.len() as f64;

        let (val_mse, val_psnr, val_ssim) = self.validate(params, val)?;
        let verdict = state.early_stop.observe(val_mse, self.cfg.early_stop_patience);
        state.epoch += 1;
        if verdict.improved {
            if let Some(path) = &self.checkpoint {
                save_checkpoint(path, self.spec(), params, Some(state))?;
            }
        }
        Ok(EpochReport {
            epoch: state.epoch,
            lr,
            train_mse,
            val_mse,
            val_psnr,
            val_ssim,
            improved: verdict.improved,
            stopped: verdict.stop,
        })
    }

    /// Mean per-image MSE, PSNR and SSIM in eval mode.
    pub fn validate(&self, params: &ModelParams, val: &[SamplePair]) -> Result<(f64, f64, f64), TrainError> {
        let (mut m, mut p, mut s) = (0.0, 0.0, 0.0);
        for batch in BatchIter::new(val, self.cfg.batch_size, None) {
            let batch = batch?;
            let out = self.model.predict(params, &batch.noisy)?;
            for i in 0..batch.ids.len() {
                let (pred, clean) = (out.sample(i)?, batch.clean.sample(i)?);
                m += metrics::mse(&clean, &pred)?;
                p += metrics::psnr(&clean, &pred, self.ssim.dynamic_range)?;
                s += metrics::ssim(&clean, &pred, &self.ssim)?;
            }
        }
        let n = val.len() as f64;
        Ok((m / n, p / n, s / n))
    }

    /// Runs epochs from `state.epoch` until early stop or `max_epochs`.
    ///
    /// A fresh run (epoch 0) starts a new log; a resumed one keeps the rows of
    /// epochs already completed and drops any later ones.
    pub fn fit(
        &self,
        mut params: ModelParams,
        mut state: TrainState,
        train: &[SamplePair],
        val: &[SamplePair],
    ) -> Result<FitOutcome, TrainError> {
        self.check_set(train, "training")?;
        self.check_set(val, "validation")?;
        if let Some(log) = &self.log {
            prepare_log(log, state.epoch)?;
        }
        let mut reports = Vec::new();
        let mut early_stopped = false;
        while state.epoch < self.cfg.max_epochs {
            let report = self.train_epoch(&mut params, &mut state, train, val)?;
            log::info!("{report}");
            if let Some(log) = &self.log {
                append_line(log, &report.csv_line())?;
            }
            early_stopped = report.stopped;
            reports.push(report);
            if early_stopped {
                break;
            }
        }
        Ok(FitOutcome {
            reports,
            params,
            state,
            early_stopped,
        })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn prepare_log(path: &Path, completed: usize) -> Result<(), TrainError> {
    let mut kept = String::from(LOG_HEADER);
    kept.push('\n');
    if completed > 0 {
        if let Ok(old) = std::fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let epoch = line.split(',').next().and_then(|e| e.parse::<usize>().ok());
                if epoch.is_some_and(|e| e <= completed) {
                    let _ = writeln!(kept, "{line}");
                }
            }
        }
    }
    std::fs::write(path, kept).map_err(io_err(path))
}

fn append_line(path: &Path, line: &str) -> Result<(), TrainError> {
    let mut f = std::fs::OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
    writeln!(f, "{line}").map_err(io_err(path))
}
