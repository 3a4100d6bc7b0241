//! Run configuration file (TOML) and its merge with flags and environment.
//!
//! Every key is optional:
//!
//! ```toml
//! variant = "raa_ds"
//! seed = 7
//! epochs = 50
//! batch_size = 32
//! learning_rate = 0.001
//! early_stop_patience = 10
//! optimizer = "sgd"            # or "adam"
//! attention_dim = 16
//! raa_gradient = "detached"    # or "through_adjacency"
//! hidden_channels = 16
//! temporal_kernel = 3
//! lookback = 12
//! horizon = 3
//! lambda_s = 0.05
//! lambda_d = 0.05
//! dd_kind = "gei"              # overrides the variant's choice
//! use_ds = true                # overrides the variant's choice
//! ```

use std::path::Path;

use anyhow::{Context, Result};
use equigrid::loss::{DdKind, LossConfig, Variant};
use equigrid::optim::OptimizerKind;
use equigrid::trainer::{RaaGradient, TrainConfig};
use equigrid::ForecastWindow;
use serde::Deserialize;

pub const SEED_ENV: &str = "EQUIGRID_SEED";

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub variant: Option<Variant>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub early_stop_patience: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
    pub attention_dim: Option<usize>,
    pub raa_gradient: Option<RaaGradient>,
    pub hidden_channels: Option<usize>,
    pub temporal_kernel: Option<usize>,
    pub lookback: Option<usize>,
    pub horizon: Option<usize>,
    pub lambda_s: Option<f64>,
    pub lambda_d: Option<f64>,
    pub dd_kind: Option<DdKind>,
    pub use_ds: Option<bool>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config file {}", path.display()))
    }
}

/// Fully resolved settings for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub window: ForecastWindow,
}

/// Seed precedence: flag, then config file, then `EQUIGRID_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, file: &FileConfig, env: Option<&str>) -> Result<u64> {
    if let Some(s) = flag.or(file.seed) {
        return Ok(s);
    }
    match env {
        Some(raw) => raw
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={raw:?} is not an unsigned integer")),
        None => Ok(0),
    }
}

pub fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

pub fn resolve(
    file: &FileConfig,
    variant_flag: Option<Variant>,
    seed_flag: Option<u64>,
    env: Option<&str>,
) -> Result<Resolved> {
    let d = TrainConfig::default();
    let variant = variant_flag.or(file.variant).unwrap_or(d.variant);
    let train = TrainConfig {
        epochs: file.epochs.unwrap_or(d.epochs),
        batch_size: file.batch_size.unwrap_or(d.batch_size),
        learning_rate: file.learning_rate.unwrap_or(d.learning_rate),
        seed: resolve_seed(seed_flag, file, env)?,
        variant,
        early_stop_patience: file.early_stop_patience.unwrap_or(d.early_stop_patience),
        optimizer: file.optimizer.unwrap_or(d.optimizer),
        attention_dim: file.attention_dim.unwrap_or(d.attention_dim),
        raa_gradient: file.raa_gradient.unwrap_or(d.raa_gradient),
        hidden_channels: file.hidden_channels.unwrap_or(d.hidden_channels),
        temporal_kernel: file.temporal_kernel.unwrap_or(d.temporal_kernel),
    };
    train.validate()?;
    let base = variant.loss_config();
    let loss = LossConfig {
        lambda_s: file.lambda_s.unwrap_or(base.lambda_s),
        lambda_d: file.lambda_d.unwrap_or(base.lambda_d),
        dd_kind: file.dd_kind.unwrap_or(base.dd_kind),
        use_ds: file.use_ds.unwrap_or(base.use_ds),
    };
    loss.validate()?;
    let fc = equigrid::ForecasterConfig::default();
    let window = ForecastWindow::new(
        file.lookback.unwrap_or(fc.lookback),
        file.horizon.unwrap_or(fc.horizon),
    )?;
    train.model_config(window).validate()?;
    Ok(Resolved { train, loss, window })
}
