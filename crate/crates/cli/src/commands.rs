use std::path::{Path, PathBuf};

use fpdenoise::data::pgm::{self, GrayImage};
use fpdenoise::data::{load_dataset, split_sizes, write_dataset, DataError, Split};
use fpdenoise::gradcheck;
use fpdenoise::metrics::{evaluate_dataset, psnr, ssim, MetricError};
use fpdenoise::network::{Model, NetworkError};
use fpdenoise::tensor::Tensor;
use fpdenoise::trainer::{
    load_checkpoint, load_checkpoint_for, CheckpointError, TrainConfig, TrainError, Trainer,
};

use crate::config::{ConfigError, RunConfig};

/// Failure of a command, grouped by exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Io(_) => 3,
            Self::Numeric(_) => 4,
            Self::Checkpoint(_) => 5,
            Self::Verification(_) => 6,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Self::Io(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } | DataError::Pgm { .. } | DataError::MissingFiles(_) | DataError::Manifest { .. } => {
                Self::Io(e.to_string())
            }
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => Self::Io(e.to_string()),
            _ => Self::Checkpoint(e.to_string()),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Tensor(fpdenoise::tensor::TensorError::NonFinite { .. }) => Self::Numeric(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            return Self::Numeric(e.to_string());
        }
        match e {
            TrainError::Io { .. } => Self::Io(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Checkpoint(c) => c.into(),
            _ => Self::Usage(e.to_string()),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn echo(cfg: &RunConfig) {
    for line in cfg.echo().lines() {
        log::info!("config: {line}");
    }
}

pub struct GenerateArgs {
    pub out: PathBuf,
    pub count: Option<usize>,
    pub size: Option<String>,
    pub seed: Option<u64>,
    pub recipe: Option<String>,
    pub config: Option<PathBuf>,
    pub force: bool,
}

pub fn generate(args: GenerateArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(n) = args.count {
        cfg.gen.count = n;
    }
    if let Some(s) = &args.size {
        cfg.set("data.size", s)?;
    }
    if let Some(s) = args.seed {
        cfg.gen.seed = s;
    }
    if let Some(r) = &args.recipe {
        cfg.set("data.recipe", r)?;
    }
    if cfg.gen.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    cfg.gen.validate()?;
    if args.out.join(fpdenoise::data::manifest::MANIFEST_FILE).exists() && !args.force {
        return Err(CliError::Usage(format!(
            "{} already holds a dataset; pass --force to overwrite",
            args.out.display()
        )));
    }
    echo(&cfg);
    let manifest = write_dataset(&cfg.gen, &args.out, cfg.fractions)?;
    let sizes = split_sizes(cfg.gen.count, cfg.fractions);
    println!(
        "wrote {} pairs of {}x{} to {} (train {}, val {}, test {})",
        cfg.gen.count,
        cfg.gen.height,
        cfg.gen.width,
        args.out.display(),
        sizes[0],
        sizes[1],
        sizes[2]
    );
    let ssim_cfg = cfg.ssim_config().map_err(CliError::Usage)?;
    let (mut p, mut s) = (0.0, 0.0);
    for e in &manifest.entries {
        let pair = manifest.load_pair(&e.id)?;
        p += psnr(&pair.clean, &pair.noisy, ssim_cfg.dynamic_range)?;
        s += ssim(&pair.clean, &pair.noisy, &ssim_cfg)?;
    }
    let n = manifest.entries.len() as f64;
    println!("noisy baseline: mean PSNR {:.4} dB, mean SSIM {:.4}", p / n, s / n);
    Ok(())
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub max_epochs: Option<usize>,
    pub seed: Option<u64>,
    pub log: Option<PathBuf>,
    pub resume: bool,
    pub force: bool,
}

/// `model.ckpt` logs to `model.csv`.
pub fn default_log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("csv")
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(e) = args.max_epochs {
        if e == 0 {
            return Err(CliError::Usage("--max-epochs must be at least 1".into()));
        }
        cfg.train.max_epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if args.resume && args.force {
        return Err(CliError::Usage("--resume and --force are mutually exclusive".into()));
    }
    if args.out.exists() && !args.resume && !args.force {
        return Err(CliError::Usage(format!(
            "{} exists; pass --resume to continue it or --force to overwrite",
            args.out.display()
        )));
    }
    let manifest = load_dataset(&args.data)?;
    let train_set = manifest.load_split(Split::Train)?;
    let val_set = manifest.load_split(Split::Val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CliError::Usage("training needs non-empty train and val splits".into()));
    }
    let train_cfg = TrainConfig {
        image_size: (manifest.height, manifest.width),
        ..cfg.train.clone()
    };
    echo(&cfg);
    log::info!("config: train.image_size = {}x{}", manifest.height, manifest.width);
    let log_path = args.log.clone().unwrap_or_else(|| default_log_path(&args.out));
    let trainer = Trainer::new(cfg.model.clone(), train_cfg)?
        .with_ssim(cfg.ssim_config().map_err(CliError::Usage)?)
        .with_checkpoint(&args.out)
        .with_log(&log_path);
    let (params, state) = if args.resume {
        let ckpt = load_checkpoint_for(&args.out, trainer.spec())?;
        if &ckpt.spec != trainer.spec() {
            return Err(CliError::Checkpoint(format!(
                "{} was trained with {:?}, config asks for {:?}",
                args.out.display(),
                ckpt.spec,
                trainer.spec()
            )));
        }
        let state = ckpt
            .state
            .ok_or_else(|| CliError::Checkpoint(format!("{} has no training state", args.out.display())))?;
        println!("resuming after epoch {}", state.epoch);
        (ckpt.params, state)
    } else {
        trainer.init()?
    };
    let outcome = trainer.fit(params, state, &train_set, &val_set)?;
    for r in &outcome.reports {
        println!("{r}");
    }
    let best = outcome.state.best_val_loss();
    println!(
        "{} after epoch {}; best val mse {best:.6}; checkpoint {}, log {}",
        if outcome.early_stopped { "early stop" } else { "finished" },
        outcome.state.epoch,
        args.out.display(),
        log_path.display()
    );
    Ok(())
}

pub struct EvalArgs {
    pub data: PathBuf,
    pub ckpt: Option<PathBuf>,
    pub split: Split,
    pub csv: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub identity: bool,
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let ssim_cfg = cfg.ssim_config().map_err(CliError::Usage)?;
    let manifest = load_dataset(&args.data)?;
    let pairs = manifest.load_split(args.split)?;
    if pairs.is_empty() {
        return Err(CliError::Usage(format!("split {} is empty", args.split)));
    }
    let report = if args.identity {
        evaluate_dataset(|x: &Tensor| Ok::<_, CliError>(x.clone()), &pairs, &ssim_cfg)?
    } else {
        let path = args
            .ckpt
            .as_deref()
            .ok_or_else(|| CliError::Usage("--ckpt is required unless --identity is given".into()))?;
        let ckpt = match &args.config {
            Some(_) => load_checkpoint_for(path, &cfg.model_spec())?,
            None => load_checkpoint(path)?,
        };
        let model = Model::new(ckpt.spec.clone())?;
        evaluate_dataset(|x: &Tensor| denoise_tensor(&model, &ckpt.params, x), &pairs, &ssim_cfg)?
    };
    print!("{}", report.table());
    let csv = args.csv.clone().unwrap_or_else(|| match &args.ckpt {
        Some(c) if !args.identity => c.with_extension(format!("{}.csv", args.split)),
        _ => args.data.join(format!("baseline.{}.csv", args.split)),
    });
    report
        .write_csv(&csv)
        .map_err(|e| CliError::Io(format!("{}: {e}", csv.display())))?;
    println!("per-image metrics written to {}", csv.display());
    Ok(())
}

/// Mirror index into `0..n`, reflecting about the edge samples.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads a `[C, H, W]` image on the bottom and right up to multiples
/// of `m`.
pub fn reflect_pad(img: &Tensor, m: usize) -> Tensor {
    let [c, h, w] = [img.shape()[0], img.shape()[1], img.shape()[2]];
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    Tensor::from_fn(vec![c, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), i / pw % ph, i % pw);
        img.data()[(ch * h + reflect(y, h)) * w + reflect(x, w)]
    })
}

/// Top-left `h`x`w` window of a `[C, H, W]` image.
pub fn crop(img: &Tensor, h: usize, w: usize) -> Tensor {
    let [c, sh, sw] = [img.shape()[0], img.shape()[1], img.shape()[2]];
    Tensor::from_fn(vec![c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), i / w % h, i % w);
        img.data()[(ch * sh + y) * sw + x]
    })
}

fn denoise_tensor(model: &Model, params: &fpdenoise::network::ModelParams, img: &Tensor) -> Result<Tensor, CliError> {
    let [c, h, w] = [img.shape()[0], img.shape()[1], img.shape()[2]];
    let padded = reflect_pad(img, model.spec().size_multiple());
    let (ph, pw) = (padded.shape()[1], padded.shape()[2]);
    let batch = padded.reshape(vec![1, c, ph, pw]).map_err(|e| CliError::Usage(e.to_string()))?;
    let out = model.predict(params, &batch)?;
    let out = out.reshape(vec![c, ph, pw]).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(crop(&out, h, w))
}

pub struct DenoiseArgs {
    pub ckpt: PathBuf,
    pub input: PathBuf,
    pub out: PathBuf,
}

pub fn denoise(args: DenoiseArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = Model::new(ckpt.spec.clone())?;
    let img = pgm::read(&args.input)?.to_tensor();
    let out = denoise_tensor(&model, &ckpt.params, &img)?;
    pgm::write(&args.out, &GrayImage::from_tensor(&out))?;
    println!(
        "denoised {}x{} {} -> {}",
        img.shape()[1],
        img.shape()[2],
        args.input.display(),
        args.out.display()
    );
    Ok(())
}

pub fn gradcheck(seed: u64, samples: usize) -> Result<(), CliError> {
    let ops = gradcheck::check_ops(seed).map_err(|e| CliError::Numeric(e.to_string()))?;
    let model = gradcheck::check_model(seed, samples).map_err(|e| CliError::Numeric(e.to_string()))?;
    let mut failed = Vec::new();
    for c in ops.checks.iter().chain(&model.checks) {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!("{:<36} max rel err {:.3e}  tol {:.0e}  {verdict}", c.name, c.max_rel_error, c.tolerance);
        if !c.passed() {
            failed.push(c.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", ops.checks.len() + model.checks.len());
        Ok(())
    } else {
        Err(CliError::Verification(format!("{} checks failed: {}", failed.len(), failed.join(", "))))
    }
}
