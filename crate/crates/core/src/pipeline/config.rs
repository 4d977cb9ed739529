use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acoustics::DomainSamplerConfig;
use crate::adaptation::{AdaptConfig, AdaptMode, DiscriminatorConfig};
use crate::autodiff::DEFAULT_LR;
use crate::error::{config_err, Result};
use crate::evaluation::SweepGrid;
use crate::par::Exec;
use crate::tracker::{CrnnConfig, TrainConfig};

/// Number of clips in each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_val: usize,
    pub target_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            source_train: 1000,
            source_val: 100,
            target_train: 1000,
            target_val: 100,
            target_test: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Draw fresh source clips every epoch instead of reusing the fixed split.
    pub fresh_clips: bool,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 150,
            batch_size: 16,
            lr: DEFAULT_LR,
            fresh_clips: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptParams {
    pub mode: AdaptMode,
    pub u: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub warmup_steps: u64,
    /// `"default"` or `"toy"`.
    pub discriminator: String,
}

impl Default for AdaptParams {
    fn default() -> Self {
        AdaptParams {
            mode: AdaptMode::Iwda,
            u: 0.01,
            epochs: 60,
            batch_size: 16,
            lr: DEFAULT_LR,
            patience: 10,
            warmup_steps: 200,
            discriminator: "default".into(),
        }
    }
}

/// Everything a run needs, loadable from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// `"default"` or `"toy"`.
    pub model: String,
    /// Labelled training and validation clips.
    pub source: DomainSamplerConfig,
    /// Unlabelled adaptation clips.
    pub target: DomainSamplerConfig,
    /// Labelled target clips for checkpoint selection.
    pub validation: DomainSamplerConfig,
    /// Labelled target clips for reporting.
    pub test: DomainSamplerConfig,
    pub splits: SplitSizes,
    /// Dataset written by `simulate`; clips are rendered in memory when absent.
    pub data_dir: Option<PathBuf>,
    /// Pretrained tracker used by adaptation, evaluation and sweeps.
    pub checkpoint: Option<PathBuf>,
    pub train: TrainParams,
    pub adapt: AdaptParams,
    pub sweep: SweepGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            model: "default".into(),
            source: DomainSamplerConfig::source_domain(),
            target: DomainSamplerConfig::pseudo_target(),
            validation: DomainSamplerConfig::pseudo_target(),
            test: DomainSamplerConfig::pseudo_target(),
            splits: SplitSizes::default(),
            data_dir: None,
            checkpoint: None,
            train: TrainParams::default(),
            adapt: AdaptParams::default(),
            sweep: SweepGrid::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data_dir, &mut cfg.checkpoint]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config_err!("{e}"))
    }

    pub fn validate(&self) -> Result<()> {
        for s in [&self.source, &self.target, &self.validation, &self.test] {
            s.validate()?;
        }
        self.crnn()?;
        self.disc_config()?;
        if self.train.batch_size == 0 || self.adapt.batch_size == 0 {
            return Err(config_err!("batch sizes must be positive"));
        }
        if !(self.train.lr > 0.0) {
            return Err(config_err!("learning rate must be positive"));
        }
        if self
            .sweep
            .u_values
            .iter()
            .any(|u| !(u.is_finite() && *u >= 0.0))
        {
            return Err(config_err!("sweep u values must be finite and nonnegative"));
        }
        self.adapt_config(self.adapt.mode, self.adapt.u, self.seed)?
            .validate()
    }

    pub fn crnn(&self) -> Result<CrnnConfig> {
        let cfg = CrnnConfig::preset(&self.model)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn disc_config(&self) -> Result<DiscriminatorConfig> {
        let input = CrnnConfig::preset(&self.model)?.gru_hidden;
        match self.adapt.discriminator.as_str() {
            "default" => Ok(DiscriminatorConfig::new(input)),
            "toy" => Ok(DiscriminatorConfig::toy(input)),
            other => Err(config_err!(
                "unknown discriminator preset {other:?} (expected default or toy)"
            )),
        }
    }

    pub fn train_config(&self, exec: Exec) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            seed: self.seed,
            exec,
        }
    }

    pub fn adapt_config(&self, mode: AdaptMode, u: f64, seed: u64) -> Result<AdaptConfig> {
        let a = &self.adapt;
        Ok(AdaptConfig {
            mode,
            u,
            lr: a.lr,
            batch_size: a.batch_size,
            epochs: a.epochs,
            patience: a.patience,
            warmup_steps: a.warmup_steps,
            seed,
            disc: self.disc_config()?,
            exec: Exec::default(),
        })
    }
}
