//! `key = value` run configuration covering generation, model, training and
//! metric settings.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use fpdenoise::data::synth::{format_recipe, parse_recipe};
use fpdenoise::data::GenConfig;
use fpdenoise::metrics::SsimConfig;
use fpdenoise::network::ModelSpec;
use fpdenoise::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for {key}: `{value}` ({message})")]
    Value {
        key: String,
        value: String,
        message: String,
    },
}

/// Every recognized key in output order.
pub const KEYS: &[&str] = &[
    "data.count",
    "data.size",
    "data.seed",
    "data.ridge_frequency",
    "data.orientation_smoothness",
    "data.recipe",
    "data.fractions",
    "model.base_channels",
    "model.channel_cap",
    "model.encoder_blocks",
    "model.decoder_blocks",
    "model.dilations",
    "train.initial_lr",
    "train.lr_halve_every",
    "train.batch_size",
    "train.dropout_rate",
    "train.early_stop_patience",
    "train.max_epochs",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_eps",
    "train.seed",
    "train.augment",
    "ssim.scales",
    "ssim.window",
    "ssim.sigma",
    "ssim.k1",
    "ssim.k2",
    "ssim.dynamic_range",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub fractions: [f64; 3],
    pub model: ModelSpec,
    /// `image_size` is taken from the dataset at training time.
    pub train: TrainConfig,
    pub ssim: SsimConfig,
    /// Number of MS-SSIM scales; weights are renormalized when below five.
    pub ssim_scales: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ssim = SsimConfig::default();
        Self {
            gen: GenConfig::default(),
            fractions: [0.8, 0.1, 0.1],
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            ssim_scales: ssim.scales(),
            ssim,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        message: e.to_string(),
    })
}

fn parse_list<T: FromStr, const N: usize>(key: &str, value: &str) -> Result<[T; N], ConfigError>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect::<Result<_, _>>()?;
    let len = items.len();
    items.try_into().map_err(|_| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        message: format!("expected {N} comma-separated values, got {len}"),
    })
}

/// Parses `HxW`.
pub fn parse_size(value: &str) -> Result<(usize, usize), String> {
    let (h, w) = value
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("`{value}` is not HxW"))?;
    let dim = |s: &str| s.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
    Ok((dim(h)?, dim(w)?))
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Starts from the defaults and applies every `key = value` line. Blank
    /// lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Line {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| ConfigError::Line {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "data.count" => self.gen.count = parse(key, v)?,
            "data.size" => {
                let (h, w) = parse_size(v).map_err(|message| ConfigError::Value {
                    key: key.into(),
                    value: v.into(),
                    message,
                })?;
                self.gen.height = h;
                self.gen.width = w;
            }
            "data.seed" => self.gen.seed = parse(key, v)?,
            "data.ridge_frequency" => self.gen.ridge_frequency = parse(key, v)?,
            "data.orientation_smoothness" => self.gen.orientation_smoothness = parse(key, v)?,
            "data.recipe" => {
                self.gen.recipe = parse_recipe(v).map_err(|message| ConfigError::Value {
                    key: key.into(),
                    value: v.into(),
                    message,
                })?
            }
            "data.fractions" => self.fractions = parse_list(key, v)?,
            "model.base_channels" => self.model.base_channels = parse(key, v)?,
            "model.channel_cap" => self.model.channel_cap = parse(key, v)?,
            "model.encoder_blocks" => self.model.encoder_blocks = parse(key, v)?,
            "model.decoder_blocks" => self.model.decoder_blocks = parse(key, v)?,
            "model.dilations" => self.model.dilations = parse_list(key, v)?,
            "train.initial_lr" => self.train.initial_lr = parse(key, v)?,
            "train.lr_halve_every" => self.train.lr_halve_every = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.dropout_rate" => self.train.dropout_rate = parse(key, v)?,
            "train.early_stop_patience" => self.train.early_stop_patience = parse(key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, v)?,
            "train.adam_beta1" => self.train.adam_beta1 = parse(key, v)?,
            "train.adam_beta2" => self.train.adam_beta2 = parse(key, v)?,
            "train.adam_eps" => self.train.adam_eps = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.augment" => self.train.augment = parse(key, v)?,
            "ssim.scales" => self.ssim_scales = parse(key, v)?,
            "ssim.window" => self.ssim.window = parse(key, v)?,
            "ssim.sigma" => self.ssim.sigma = parse(key, v)?,
            "ssim.k1" => self.ssim.k1 = parse(key, v)?,
            "ssim.k2" => self.ssim.k2 = parse(key, v)?,
            "ssim.dynamic_range" => self.ssim.dynamic_range = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "data.count" => self.gen.count.to_string(),
            "data.size" => format!("{}x{}", self.gen.height, self.gen.width),
            "data.seed" => self.gen.seed.to_string(),
            "data.ridge_frequency" => self.gen.ridge_frequency.to_string(),
            "data.orientation_smoothness" => self.gen.orientation_smoothness.to_string(),
            "data.recipe" => format_recipe(&self.gen.recipe),
            "data.fractions" => join(&self.fractions),
            "model.base_channels" => self.model.base_channels.to_string(),
            "model.channel_cap" => self.model.channel_cap.to_string(),
            "model.encoder_blocks" => self.model.encoder_blocks.to_string(),
            "model.decoder_blocks" => self.model.decoder_blocks.to_string(),
            "model.dilations" => join(&self.model.dilations),
            "train.initial_lr" => self.train.initial_lr.to_string(),
            "train.lr_halve_every" => self.train.lr_halve_every.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.dropout_rate" => self.train.dropout_rate.to_string(),
            "train.early_stop_patience" => self.train.early_stop_patience.to_string(),
            "train.max_epochs" => self.train.max_epochs.to_string(),
            "train.adam_beta1" => self.train.adam_beta1.to_string(),
            "train.adam_beta2" => self.train.adam_beta2.to_string(),
            "train.adam_eps" => self.train.adam_eps.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.augment" => self.train.augment.to_string(),
            "ssim.scales" => self.ssim_scales.to_string(),
            "ssim.window" => self.ssim.window.to_string(),
            "ssim.sigma" => self.ssim.sigma.to_string(),
            "ssim.k1" => self.ssim.k1.to_string(),
            "ssim.k2" => self.ssim.k2.to_string(),
            "ssim.dynamic_range" => self.ssim.dynamic_range.to_string(),
            _ => return None,
        })
    }

    /// All effective values as parseable `key = value` lines.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    /// Model spec with the training dropout rate applied.
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            dropout_rate: self.train.dropout_rate,
            ..self.model.clone()
        }
    }

    /// The metric config with weights cut to `ssim_scales` scales.
    pub fn ssim_config(&self) -> Result<SsimConfig, String> {
        let n = self.ssim_scales;
        let full = SsimConfig::default();
        if n == 0 || n > full.scales() {
            return Err(format!("ssim.scales must be 1..={}, got {n}", full.scales()));
        }
        let mut cfg = SsimConfig {
            beta: full.beta.clone(),
            gamma: full.gamma.clone(),
            alpha: full.alpha,
            ..self.ssim.clone()
        };
        if n < full.scales() {
            let total: f64 = full.beta[..n].iter().sum();
            let weights: Vec<f64> = full.beta[..n].iter().map(|w| w / total).collect();
            cfg.alpha = weights[n - 1];
            cfg.beta = weights.clone();
            cfg.gamma = weights;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}
