//! Run configuration: built-in defaults, overridden by a flat `key = value`
//! file (`--config`), overridden by command-line flags.
//!
//! The file is TOML restricted to top-level scalars, e.g.
//!
//! ```text
//! # vessel run
//! seed = 7
//! profile = "vessel"
//! window = 30
//! horizon = 30
//! epochs = 200
//! ```
//!
//! Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use odisar_core::dtm::TrainConfig;
use odisar_core::eval::{ExperimentConfig, Profile};

/// Every overridable setting; `None` means "not given at this layer".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// Top-level seed all sub-seeds derive from.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model profile: vessel or robot.
    #[arg(long)]
    pub profile: Option<String>,
    /// Threshold sensitivity (tau = mu + k sigma).
    #[arg(long)]
    pub k: Option<f64>,
    /// Monte-Carlo dropout passes per window.
    #[arg(long)]
    pub passes: Option<usize>,
    /// Input window length w.
    #[arg(long)]
    pub window: Option<usize>,
    /// Forecast horizon h.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Offset between consecutive training windows.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Stop after this many epochs without validation improvement.
    #[arg(long)]
    pub patience: Option<usize>,
}

impl Overrides {
    fn layer(self, over: Overrides) -> Overrides {
        Overrides {
            seed: over.seed.or(self.seed),
            out: over.out.or(self.out),
            profile: over.profile.or(self.profile),
            k: over.k.or(self.k),
            passes: over.passes.or(self.passes),
            window: over.window.or(self.window),
            horizon: over.horizon.or(self.horizon),
            stride: over.stride.or(self.stride),
            epochs: over.epochs.or(self.epochs),
            learning_rate: over.learning_rate.or(self.learning_rate),
            batch_size: over.batch_size.or(self.batch_size),
            patience: over.patience.or(self.patience),
        }
    }
}

/// Fully resolved settings, echoed to `<command>_config.toml`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub out: PathBuf,
    pub profile: String,
    pub k: f64,
    pub passes: usize,
    pub window: usize,
    pub horizon: usize,
    pub stride: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// 0 disables early stopping.
    pub patience: usize,
}

impl RunConfig {
    /// `base` supplies the defaults for everything neither layer sets.
    pub fn resolve(
        command: &str,
        file: Option<&Path>,
        flags: Overrides,
        base: &ExperimentConfig,
    ) -> Result<Self> {
        let from_file = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str::<Overrides>(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => Overrides::default(),
        };
        let o = from_file.layer(flags);
        let (exp, train) = (base, &base.train);
        let cfg = RunConfig {
            command: command.to_string(),
            seed: o.seed.unwrap_or(exp.seed),
            out: o.out.unwrap_or_else(|| PathBuf::from("out")),
            profile: o.profile.unwrap_or_else(|| "vessel".into()),
            k: o.k.unwrap_or(exp.k),
            passes: o.passes.unwrap_or(exp.n_passes),
            window: o.window.unwrap_or(exp.w),
            horizon: o.horizon.unwrap_or(exp.h),
            stride: o.stride.unwrap_or(exp.train_stride),
            epochs: o.epochs.unwrap_or(train.epochs),
            learning_rate: o.learning_rate.unwrap_or(train.learning_rate),
            batch_size: o.batch_size.unwrap_or(train.batch_size),
            patience: o.patience.unwrap_or(0),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        Profile::parse(&self.profile)?;
        if !(self.k > 0.0 && self.k.is_finite()) {
            bail!("k must be positive, got {}", self.k);
        }
        if self.passes < 2 {
            bail!("passes must be >= 2, got {}", self.passes);
        }
        if self.window == 0 || self.horizon == 0 || self.stride == 0 {
            bail!("window, horizon and stride must be >= 1");
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn profile(&self) -> Profile {
        Profile::parse(&self.profile).expect("validated profile")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed: self.seed,
            patience: (self.patience > 0).then_some(self.patience),
            ..TrainConfig::default()
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            seed: self.seed,
            w: self.window,
            h: self.horizon,
            train_stride: self.stride,
            k: self.k,
            n_passes: self.passes,
            train: self.train_config(),
        }
    }

    /// Creates the output directory and writes `<command>_config.toml`.
    pub fn echo(&self) -> Result<()> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating output directory {}", self.out.display()))?;
        let path = self
            .out
            .join(format!("{}_config.toml", self.command.replace('-', "_")));
        let text = toml::to_string(self).context("serializing resolved config")?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
