//! Run configuration: a flat `key = value` file (with `#` comments and dotted
//! keys) covering architecture, training, attack, and data settings. Unknown
//! keys are rejected so typos fail loudly; CLI flags override file values.

use std::path::{Path, PathBuf};

use crate::attack::AttackConfig;
use crate::data::{load_cifar_binary, load_dataset, synthetic_blobs, CifarVariant, Dataset};
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    /// Synthetic separable blobs sized to the architecture.
    Blobs,
    /// Raw tensor dataset file.
    Lsdt,
    Cifar10,
    Cifar100,
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub kind: DataKind,
    pub path: Option<PathBuf>,
    /// Sample count for synthetic data.
    pub samples: usize,
    pub separation: f64,
    pub noise: f64,
    /// Trailing fraction of the (shuffled-by-construction) data held out for
    /// evaluation.
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Blobs,
            path: None,
            samples: 256,
            separation: 1.2,
            noise: 0.05,
            eval_fraction: 0.25,
            seed: 7,
        }
    }
}

impl DataConfig {
    /// Loads (or generates) the dataset and splits off the evaluation tail.
    pub fn load<S: Scalar>(&self, arch: &ArchConfig) -> Result<(Dataset<S>, Dataset<S>)> {
        let full = match self.kind {
            DataKind::Blobs => synthetic_blobs(
                self.samples,
                arch.num_classes,
                arch.input_channels,
                arch.input_size,
                arch.input_size,
                self.separation,
                self.noise,
                self.seed,
            )?,
            DataKind::Lsdt => load_dataset(self.require_path()?)?,
            DataKind::Cifar10 => load_cifar_binary(self.require_path()?, CifarVariant::C10)?,
            DataKind::Cifar100 => load_cifar_binary(self.require_path()?, CifarVariant::C100)?,
        };
        let s = full.images.shape();
        if s[1] != arch.input_channels || s[2] != arch.input_size || s[3] != arch.input_size {
            return Err(Error::config(
                "data",
                format!(
                    "dataset images are [{},{},{}], architecture expects [{},{},{}]",
                    s[1], s[2], s[3], arch.input_channels, arch.input_size, arch.input_size
                ),
            ));
        }
        let n = full.len();
        let n_eval = ((self.eval_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
        let n_train = n - n_eval;
        if n_train == 0 {
            return Err(Error::config("data.eval_fraction", "no training samples left"));
        }
        let split = |lo: usize, hi: usize| -> Result<Dataset<S>> {
            let per: usize = s[1] * s[2] * s[3];
            Dataset::new(
                Tensor::new(
                    vec![hi - lo, s[1], s[2], s[3]],
                    full.images.data()[lo * per..hi * per].to_vec(),
                )?,
                full.labels[lo..hi].to_vec(),
                full.num_classes,
            )
        };
        Ok((split(0, n_train)?, split(n_train, n)?))
    }

    fn require_path(&self) -> Result<&Path> {
        self.path
            .as_deref()
            .ok_or_else(|| Error::config("data.path", "required for file-based datasets"))
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: ArchConfig::desk(),
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config("config", format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.arch.validate()?;
        Ok(cfg)
    }

    /// Applies a single dotted `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(key, format!("`{v}` is not {what}")))
        }
        let usize_list = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|x| p::<usize>(key, x.trim(), "a non-negative integer"))
                .collect()
        };
        match key {
            "arch.input_channels" => self.arch.input_channels = p(key, value, "an integer")?,
            "arch.input_size" => self.arch.input_size = p(key, value, "an integer")?,
            "arch.patch_size" => self.arch.patch_size = p(key, value, "an integer")?,
            "arch.stage_depths" => self.arch.stage_depths = usize_list(value)?,
            "arch.embed_dims" => self.arch.embed_dims = usize_list(value)?,
            "arch.shift_fraction" => self.arch.shift_fraction = p(key, value, "a number")?,
            "arch.p_drop" => self.arch.p_drop = p(key, value, "a number")?,
            "arch.num_classes" => self.arch.num_classes = p(key, value, "an integer")?,
            "train.epochs" => self.train.epochs = p(key, value, "an integer")?,
            "train.batch_size" => self.train.batch_size = p(key, value, "an integer")?,
            "train.lr" => self.train.lr = p(key, value, "a number")?,
            "train.weight_decay" => self.train.weight_decay = p(key, value, "a number")?,
            "train.eps" => self.train.eps = p(key, value, "a number")?,
            "train.seed" => self.train.seed = p(key, value, "an integer")?,
            "train.aug_pad" => self.train.aug_pad = p(key, value, "an integer")?,
            "train.clean_fraction" => self.train.clean_fraction = p(key, value, "a number")?,
            "train.detach_k" => self.train.detach_k = p(key, value, "a boolean")?,
            "train.drop_scaling" => self.train.drop_scaling = p(key, value, "a boolean")?,
            "attack.eps" => self.attack.eps = p(key, value, "a number")?,
            "attack.steps" => self.attack.steps = p(key, value, "an integer")?,
            "attack.step_size" => self.attack.step_size = p(key, value, "a number")?,
            "attack.restarts" => self.attack.restarts = p(key, value, "an integer")?,
            "attack.seed" => self.attack.seed = p(key, value, "an integer")?,
            "data.kind" => {
                self.data.kind = match value {
                    "blobs" => DataKind::Blobs,
                    "lsdt" => DataKind::Lsdt,
                    "cifar10" => DataKind::Cifar10,
                    "cifar100" => DataKind::Cifar100,
                    other => {
                        return Err(Error::config(
                            key,
                            format!("`{other}` is not one of blobs|lsdt|cifar10|cifar100"),
                        ))
                    }
                }
            }
            "data.path" => self.data.path = Some(PathBuf::from(value)),
            "data.samples" => self.data.samples = p(key, value, "an integer")?,
            "data.separation" => self.data.separation = p(key, value, "a number")?,
            "data.noise" => self.data.noise = p(key, value, "a number")?,
            "data.eval_fraction" => self.data.eval_fraction = p(key, value, "a number")?,
            "data.seed" => self.data.seed = p(key, value, "an integer")?,
            other => return Err(Error::config(other, "unknown configuration key")),
        }
        Ok(())
    }
}
