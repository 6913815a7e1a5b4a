//! Run configuration: TOML with sections, unknown keys rejected, plus
//! `key=value` overrides addressed by dotted paths (`loss.variant=gcpl`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitStyle;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{EncoderConfig, InitScheme};
use crate::optim::LrSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    pub fn num_classes(self) -> usize {
        match self {
            DatasetKind::Mnist | DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 => 100,
        }
    }

    pub fn image_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist => [1, 28, 28],
            _ => [3, 32, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    pub root: PathBuf,
    pub split: SplitStyle,
    pub n_known: usize,
    /// Unknown class count; all remaining classes when absent (required for `cross`).
    pub n_unknown: Option<usize>,
    /// Seed of the class split; the global seed when absent.
    pub trial_seed: Option<u64>,
    /// Source of unknown classes for the `cross` split.
    pub unknown_dataset: Option<DatasetKind>,
    pub unknown_root: Option<PathBuf>,
    /// Uniform-noise images added to the unknown test set.
    pub noise: usize,
    /// Noisy copies of MNIST test images added to the unknown test set.
    pub mnist_noise: usize,
    /// Use only the first `n` training / test images (smoke runs).
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: DatasetKind::Mnist,
            root: PathBuf::from("data/mnist"),
            split: SplitStyle::Within,
            n_known: 6,
            n_unknown: None,
            trial_seed: None,
            unknown_dataset: None,
            unknown_root: None,
            noise: 0,
            mnist_noise: 0,
            train_limit: None,
            test_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrototypeConfig {
    pub init: InitScheme,
    pub scale: f64,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        PrototypeConfig {
            init: InitScheme::Gaussian,
            scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub step_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let s = LrSchedule::default();
        OptimConfig {
            lr: 0.003,
            momentum: 0.9,
            weight_decay: 0.0,
            decay_factor: s.decay_factor,
            step_every: s.step_every,
            epochs: s.total_epochs,
            batch_size: 128,
        }
    }
}

impl OptimConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial_lr: self.lr,
            decay_factor: self.decay_factor,
            step_every: self.step_every,
            total_epochs: self.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub percentile: f64,
    pub bins: usize,
    /// Unknown class counts evaluated by `sweep-openness`.
    pub sweep_unknown: Vec<usize>,
    /// Compute closed-set test accuracy after every epoch.
    pub validate: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            percentile: crate::eval::DEFAULT_PERCENTILE,
            bins: crate::eval::DEFAULT_BINS,
            sweep_unknown: Vec::new(),
            validate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub prototypes: PrototypeConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            prototypes: PrototypeConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text`, applies `key=value` overrides, then validates.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(config_err)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(Error::Config(format!("bad override key '{key}'")));
            }
            let mut node = &mut table;
            for part in &path[..path.len() - 1] {
                let entry = node
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                node = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("'{part}' in '{key}' is not a section")))?;
            }
            node.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
        }
        let config: RunConfig = toml::Value::Table(table).try_into().map_err(config_err)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        self.optim.schedule().validate()?;
        let o = &self.optim;
        if o.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        if !(self.eval.percentile > 0.0 && self.eval.percentile < 100.0) || self.eval.bins == 0 {
            return Err(Error::Config("percentile must be in (0, 100) and bins positive".into()));
        }
        if !(self.prototypes.scale >= 0.0 && self.prototypes.scale.is_finite()) {
            return Err(Error::Config("prototype scale must be finite and >= 0".into()));
        }
        let d = &self.data;
        if self.encoder.input_shape != d.dataset.image_shape() {
            return Err(Error::Config(format!(
                "encoder.input_shape {:?} does not match {:?} images {:?}",
                self.encoder.input_shape,
                d.dataset,
                d.dataset.image_shape()
            )));
        }
        if d.split == SplitStyle::Cross && (d.unknown_dataset.is_none() || d.n_unknown.is_none()) {
            return Err(Error::Config(
                "split = \"cross\" needs data.unknown_dataset and data.n_unknown".into(),
            ));
        }
        if d.split == SplitStyle::Outlier && d.noise + d.mnist_noise == 0 {
            return Err(Error::Config(
                "split = \"outlier\" needs data.noise or data.mnist_noise > 0".into(),
            ));
        }
        if d.mnist_noise > 0 && d.dataset != DatasetKind::Mnist {
            return Err(Error::Config("mnist_noise requires the mnist dataset".into()));
        }
        Ok(())
    }

    pub fn trial_seed(&self) -> u64 {
        self.data.trial_seed.unwrap_or(self.seed)
    }
}
